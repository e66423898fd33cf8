//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Positional arguments select criteria by id
//! substring (`cargo test --test acceptance -- c4 c5`).

mod common;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use treeclust_core::augment::{make_pair_batch, AugmentationPolicy};
use treeclust_core::data::{load_dataset, DataSource, Dataset, DatasetSpec, IdxPair, Labels};
use treeclust_core::losses::{cohi_loss, total_loss, LevelRange, LossConfig};
use treeclust_core::metrics::{acc, class_distance_matrix, dendrogram_purity, nmi, ClusterScores, LabeledAssignment};
use treeclust_core::model::{Architecture, ContrastHeadSpec, EncoderSpec, Model, ModelSpec};
use treeclust_core::training::{assign_dataset, tree_loss_and_grad, Phase, Profile, Session, TrainState};
use treeclust_core::tree::{leaf_posterior, RoutingTensor};
use treeclust_core::{Result, TreeTopology};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn random_topology(rng: &mut ChaCha8Rng, max_depth: usize) -> TreeTopology {
    let depth = rng.random_range(1..=max_depth);
    let leaves = 1 << depth;
    loop {
        let mask: Vec<bool> = (0..leaves).map(|_| rng.random_bool(0.7)).collect();
        if mask.iter().filter(|&&a| a).count() >= 2 {
            return TreeTopology::with_mask(depth, mask).unwrap();
        }
    }
}

fn random_edges(rng: &mut ChaCha8Rng, rows: usize, topo: &TreeTopology) -> Array2<f64> {
    Array2::from_shape_fn((rows, topo.num_internal()), |_| rng.random::<f64>())
}

fn c1_probability_invariants() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let tol = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let topo = random_topology(&mut rng, 5);
        let routing = RoutingTensor::compute(random_edges(&mut rng, 8, &topo), &topo)?;
        let post = routing.node_posteriors();
        for row in post.rows() {
            for t in 0..=topo.depth() {
                let start = TreeTopology::heap_index(t, 0);
                worst = worst.max((row.slice(s![start..start + (1 << t)]).sum() - 1.0).abs());
            }
            for h in 0..topo.num_internal() {
                worst = worst.max((row[h] - row[2 * h + 1] - row[2 * h + 2]).abs());
            }
        }
        if topo.active_leaf_count() > 2 {
            let active: Vec<usize> = topo.active_leaves().collect();
            let leaf = active[rng.random_range(0..active.len())];
            let pruned = topo.prune_leaf(leaf)?;
            let after = RoutingTensor::compute(routing.edge_left_prob().to_owned(), &pruned)?;
            // the pruned leaf's mass lands in its nearest live ancestor's subtree
            let mut level = topo.depth();
            while !pruned.is_alive(TreeTopology::heap_index(level, leaf >> (topo.depth() - level))) {
                level -= 1;
            }
            let anchor = leaf >> (topo.depth() - level);
            let span = pruned.subtree_leaves(level, anchor);
            for (b, a) in post.rows().into_iter().zip(after.node_posteriors().rows()) {
                let leaves_after = a.slice(s![topo.num_internal()..]);
                worst = worst.max((leaves_after.sum() - 1.0).abs());
                worst = worst.max(leaves_after[leaf].abs());
                let moved = leaves_after.slice(s![span.clone()]).sum();
                worst = worst.max((moved - b[TreeTopology::heap_index(level, anchor)]).abs());
            }
        }
    }
    Ok(verdict(worst <= tol, format!("1000 trees, worst deviation {worst:.2e} (tol {tol:.0e})")))
}

fn c2_oracle_equivalence() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (mut worst_leaf, mut worst_cohi, mut worst_metric) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..300 {
        let topo = random_topology(&mut rng, 5);
        let edges: Vec<f64> = (0..topo.num_internal()).map(|_| rng.random()).collect();
        let got = leaf_posterior(&edges, &topo)?;
        let want = common::leaf_posterior_by_paths(&edges, topo.active_leaf_mask());
        for (g, w) in got.iter().zip(&want) {
            worst_leaf = worst_leaf.max((g - w).abs());
        }
    }
    for trial in 0..200 {
        let topo = random_topology(&mut rng, 4);
        let n = rng.random_range(2..=8);
        let anchors = RoutingTensor::compute(random_edges(&mut rng, n, &topo), &topo)?;
        let views = RoutingTensor::compute(random_edges(&mut rng, n, &topo), &topo)?;
        let mut cfg = LossConfig::for_depth(topo.depth());
        if trial % 2 == 1 {
            cfg.level_range = LevelRange::PaperLiteral;
        }
        let rows = |r: &RoutingTensor| -> Vec<Vec<f64>> { r.leaves().rows().into_iter().map(|x| x.to_vec()).collect() };
        let want = common::cohi_by_pairs(&rows(&anchors), &rows(&views), cfg.level_range.levels(topo.depth()), cfg.epsilon);
        worst_cohi = worst_cohi.max((cohi_loss(&anchors, &views, &topo, &cfg)? - want).abs());
    }
    for _ in 0..40 {
        let topo = random_topology(&mut rng, 5);
        let active: Vec<usize> = topo.active_leaves().collect();
        let n = rng.random_range(2..=200);
        let k = rng.random_range(1..=6);
        let leaves: Vec<usize> = (0..n).map(|_| active[rng.random_range(0..active.len())]).collect();
        let classes: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let assign = LabeledAssignment::new(leaves.clone(), classes.clone(), k, topo.clone())?;
        if let Ok(dp) = dendrogram_purity(&assign) {
            worst_metric = worst_metric.max((dp - common::purity_by_pairs(topo.depth(), &leaves, &classes)).abs());
        }
        let names: Vec<String> = (0..k).map(|c| c.to_string()).collect();
        let m = class_distance_matrix(&assign, &names)?;
        let want = common::class_distance_by_pairs(topo.depth(), &leaves, &classes, k);
        for a in 0..k {
            for b in 0..k {
                worst_metric = worst_metric.max((m.values[[a, b]] - want[a][b]).abs());
            }
        }
    }
    let pass = worst_leaf <= 1e-9 && worst_cohi <= 1e-9 && worst_metric <= 1e-12;
    Ok(verdict(
        pass,
        format!("leaf posterior {worst_leaf:.1e}, cohi {worst_cohi:.1e}, purity/distance {worst_metric:.1e}"),
    ))
}

fn small_model(depth: usize, seed: u64) -> Result<(Model, Array2<f64>)> {
    let (data, _) = load_dataset(&DatasetSpec::gaussians(4, 64, 16, seed))?;
    let spec = ModelSpec {
        encoder: EncoderSpec {
            architecture: Architecture::MlpSmall,
            input: data.shape(),
            embed_dim: 16,
        },
        depth,
        contrast: ContrastHeadSpec::identity(16),
    };
    let model = Model::new(spec, seed)?;
    let batch = make_pair_batch(&data, &AugmentationPolicy::gaussian_noise(0.1), 4, seed)?;
    Ok((model, batch.stacked()))
}

fn c3_gradient_check() -> Result<Verdict> {
    let depth = 2;
    let (mut model, x) = small_model(depth, 3)?;
    let topo = TreeTopology::new(depth)?;
    let cfg = LossConfig::for_depth(depth);
    let (_, grads) = tree_loss_and_grad(&mut model, x.clone(), &topo, &cfg)?;
    let loss_at = |m: &mut Model| -> Result<f64> {
        let pass = m.forward_train(x.clone(), true)?;
        let routing = RoutingTensor::compute(pass.edge_left_prob().unwrap().clone(), &topo)?;
        Ok(total_loss(&routing, pass.contrast_embeddings().view(), &topo, &cfg)?.total)
    };
    let groups = model.groups().clone();
    let h = 1e-5;
    let (mut good, mut total) = (0usize, 0usize);
    for i in groups.encoder.clone().chain(groups.router.clone()) {
        let orig = model.params()[i];
        model.params_mut()[i] = orig + h;
        let up = loss_at(&mut model)?;
        model.params_mut()[i] = orig - h;
        let down = loss_at(&mut model)?;
        model.params_mut()[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let scale = grads[i].abs().max(fd.abs()).max(1e-8);
        total += 1;
        good += usize::from((grads[i] - fd).abs() / scale < 1e-3);
    }
    let share = good as f64 / total as f64;
    Ok(verdict(
        share >= 0.95,
        format!("{good}/{total} coordinates within 1e-3 relative ({:.2}%)", 100.0 * share),
    ))
}

fn gaussian_run(depth: usize, target: usize, eval_every: usize) -> Result<(TrainState, Dataset, Labels)> {
    let seed = 1;
    let (data, labels) = load_dataset(&DatasetSpec::gaussians(4, 4000, 16, seed))?;
    let spec = ModelSpec {
        encoder: EncoderSpec {
            architecture: Architecture::MlpSmall,
            input: data.shape(),
            embed_dim: 32,
        },
        depth,
        contrast: ContrastHeadSpec::identity(32),
    };
    let mut schedule = Profile::Desk.schedule(depth);
    schedule.target_leaves = target;
    schedule.seed = seed;
    schedule.eval_every = eval_every;
    let mut state = TrainState::new(spec, schedule, LossConfig::for_depth(depth))?;
    let policy = AugmentationPolicy::default_for(data.shape());
    let mut eval = |m: &Model, t: &TreeTopology| -> Result<ClusterScores> { score(m, t, &data, &labels) };
    let mut session = Session::new(&data, &policy);
    session.evaluator = Some(&mut eval);
    state.run(session)?;
    Ok((state, data, labels))
}

fn score(model: &Model, topo: &TreeTopology, data: &Dataset, labels: &Labels) -> Result<ClusterScores> {
    let leaves = assign_dataset(model, topo, data)?;
    let assign = LabeledAssignment::new(leaves, labels.ids().to_vec(), labels.num_classes(), topo.clone())?;
    Ok(ClusterScores::compute(&assign))
}

fn c4_desk_synthetic() -> Result<Verdict> {
    let (state, data, labels) = gaussian_run(2, 4, 0)?;
    let leaves = assign_dataset(&state.model, &state.topology, &data)?;
    let (n, a) = (nmi(&leaves, labels.ids()), acc(&leaves, labels.ids()));
    let mut counts = vec![0usize; 4];
    for &l in &leaves {
        counts[l] += 1;
    }
    let min_share = *counts.iter().min().unwrap() as f64 / leaves.len() as f64;
    Ok(verdict(
        n >= 0.90 && a >= 0.95 && min_share >= 0.10,
        format!("nmi {n:.4} acc {a:.4} smallest leaf share {min_share:.3}"),
    ))
}

fn c5_pruning(state: &TrainState, data: &Dataset, labels: &Labels) -> Result<Verdict> {
    let mut active = vec![true; 8];
    let mut minimal = true;
    let mut prunes = 0;
    for event in state.history.iter().filter_map(|r| r.pruned.as_ref()) {
        let smallest = (0..8)
            .filter(|&l| active[l])
            .map(|l| event.masses[l])
            .fold(f64::INFINITY, f64::min);
        minimal &= active[event.leaf] && event.masses[event.leaf] == smallest && event.mass == smallest;
        active[event.leaf] = false;
        prunes += 1;
    }
    let final_nmi = score(&state.model, &state.topology, data, labels)?.nmi;
    let count = state.topology.active_leaf_count();
    Ok(verdict(
        count == 4 && prunes == 4 && minimal && final_nmi >= 0.90,
        format!("{count} leaves after {prunes} prunes, every pruned mass minimal: {minimal}, final nmi {final_nmi:.4}"),
    ))
}

fn c8_learning_curve(state: &TrainState) -> Result<Verdict> {
    let pruned: Vec<usize> = state.history.iter().filter(|r| r.pruned.is_some()).map(|r| r.epoch).collect();
    let (Some(&first), Some(&last)) = (pruned.first(), pruned.last()) else {
        return Ok(verdict(false, "no prune happened".into()));
    };
    let mean_nmi = |range: std::ops::Range<usize>| -> Option<f64> {
        let vals: Vec<f64> = state
            .history
            .iter()
            .filter(|r| range.contains(&r.epoch))
            .filter_map(|r| r.metrics.map(|m| m.nmi))
            .collect();
        (vals.len() == 5).then(|| vals.iter().sum::<f64>() / 5.0)
    };
    match (mean_nmi(first.saturating_sub(5)..first), mean_nmi(last + 1..last + 6)) {
        (Some(before), Some(after)) => Ok(verdict(
            after > before,
            format!("mean nmi before pruning {before:.4}, after {after:.4} (prunes at epochs {first}..={last})"),
        )),
        _ => Ok(verdict(false, "fewer than 5 evaluated epochs on one side of pruning".into())),
    }
}

fn mnist_spec(subset: usize) -> DatasetSpec {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-10k");
    let mut spec = DatasetSpec::new(DataSource::IdxGrayscale {
        files: vec![IdxPair {
            images: dir.join("images-idx3-ubyte.gz"),
            labels: dir.join("labels-idx1-ubyte.gz"),
        }],
    });
    spec.subset = Some(subset);
    spec
}

fn grayscale_state(data: &Dataset, pretrain: usize, tree: usize) -> Result<TrainState> {
    let spec = ModelSpec {
        encoder: EncoderSpec {
            architecture: Architecture::CnnSmall,
            input: data.shape(),
            embed_dim: 32,
        },
        depth: 4,
        contrast: ContrastHeadSpec::identity(32),
    };
    let mut schedule = Profile::Grayscale.schedule(4);
    schedule.pretrain_epochs = pretrain;
    schedule.tree_epochs = tree;
    schedule.target_leaves = 10;
    TrainState::new(spec, schedule, LossConfig::for_depth(4))
}

fn c6_mnist_substitute() -> Result<Verdict> {
    let (data, labels) = load_dataset(&mnist_spec(10_000))?;
    let mut state = grayscale_state(&data, 40, 40)?;
    let policy = AugmentationPolicy::default_for(data.shape());
    state.run(Session::new(&data, &policy))?;
    let leaves = assign_dataset(&state.model, &state.topology, &data)?;
    let n = nmi(&leaves, labels.ids());
    let assign = LabeledAssignment::new(leaves, labels.ids().to_vec(), labels.num_classes(), state.topology.clone())?;
    let dp = dendrogram_purity(&assign)?;
    let count = state.topology.active_leaf_count();
    Ok(verdict(
        n >= 0.55 && dp >= 0.40 && count == 10,
        format!("{} samples, {count} leaves, nmi {n:.4} dp {dp:.4}", data.len()),
    ))
}

fn c6_full_profile() -> Result<Verdict> {
    let (data, _) = load_dataset(&mnist_spec(1024))?;
    let mut state = grayscale_state(&data, 200, 100)?;
    let policy = AugmentationPolicy::default_for(data.shape());
    state.run(Session::new(&data, &policy))?;
    let counts: Vec<usize> = state.history.iter().map(|r| r.active_leaves).collect();
    let monotone = counts.windows(2).all(|w| w[1] <= w[0] && w[0] - w[1] <= 1);
    let pretrain_fixed = state
        .history
        .iter()
        .filter(|r| r.phase == Phase::Pretrain)
        .all(|r| r.active_leaves == 16 && r.pruned.is_none());
    let finite = state.history.iter().all(|r| r.loss.total.is_finite());
    let pass = state.phase == Phase::Done && state.history.len() == 300 && monotone && pretrain_fixed && finite && counts.last() == Some(&10);
    Ok(verdict(
        pass,
        format!(
            "{} epochs on {} samples, leaves {} -> {}, monotone {monotone}, losses finite {finite}",
            state.history.len(),
            data.len(),
            counts.first().unwrap_or(&0),
            counts.last().unwrap_or(&0)
        ),
    ))
}

fn c7_level_range_gradients() -> Result<Verdict> {
    let depth = 3;
    let (mut model, x) = small_model(depth, 7)?;
    let topo = TreeTopology::new(depth)?;
    let n = model.spec().encoder.embed_dim;
    let router = model.groups().router.clone();
    let w = model.router_head().weights().to_owned();
    assert_eq!(w.dim(), (topo.num_internal(), n));
    assert_eq!(model.params()[router.start..router.start + w.len()], *w.as_slice().unwrap());
    let deepest = TreeTopology::heap_index(depth - 1, 0)..topo.num_internal();
    let mut max_abs = Vec::new();
    for range in [LevelRange::PaperLiteral, LevelRange::IncludeLeaves] {
        let cfg = LossConfig {
            beta1: 0.0,
            beta2: 0.0,
            level_range: range,
            ..LossConfig::for_depth(depth)
        };
        let (_, grads) = tree_loss_and_grad(&mut model, x.clone(), &topo, &cfg)?;
        let g = &grads[router.start + deepest.start * n..router.start + deepest.end * n];
        max_abs.push(g.iter().fold(0.0f64, |m, v| m.max(v.abs())));
    }
    Ok(verdict(
        max_abs[0] == 0.0 && max_abs[1] > 0.0,
        format!(
            "deepest router weights: max |grad| {:e} with paper_literal, {:.3e} with include_leaves",
            max_abs[0], max_abs[1]
        ),
    ))
}

struct Criterion {
    id: &'static str,
    name: &'static str,
    limit: Duration,
}

fn report(c: &Criterion, started: Instant, result: Result<Verdict>) -> bool {
    let elapsed = started.elapsed();
    let (pass, detail) = match result {
        Ok(v) => (v.pass, v.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    let in_time = elapsed <= c.limit;
    let ok = pass && in_time;
    println!(
        "{} [{}] {}: {detail} ({:.1}s, limit {}s{})",
        if ok { "PASS" } else { "FAIL" },
        c.id,
        c.name,
        elapsed.as_secs_f64(),
        c.limit.as_secs(),
        if in_time { "" } else { ", over time" }
    );
    ok
}

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let list = std::env::args().any(|a| a == "--list");
    let minutes = |m: u64| Duration::from_secs(60 * m);
    let crit = |id, name, limit| Criterion { id, name, limit };
    let criteria = [
        crit("c1", "probability invariants", Duration::from_secs(10)),
        crit("c2", "oracle equivalence", Duration::from_secs(30)),
        crit("c3", "gradient check", minutes(1)),
        crit("c4", "desk synthetic run", minutes(5)),
        crit("c5", "pruning to target", minutes(10)),
        crit("c6a", "grayscale substitute", minutes(60)),
        crit("c6b", "full grayscale profile", minutes(120)),
        crit("c7", "level-range gradients", minutes(1)),
        crit("c8", "learning curve around pruning", minutes(10)),
    ];
    let selected = |c: &Criterion| filters.is_empty() || filters.iter().any(|f| c.id.contains(f.as_str()));
    if list {
        for c in criteria.iter().filter(|c| selected(c)) {
            println!("{}: test", c.id);
        }
        return ExitCode::SUCCESS;
    }

    let mut all = true;
    let mut pruning_run = None;
    for c in criteria.iter().filter(|c| selected(c)) {
        let started = Instant::now();
        let result = match c.id {
            "c1" => c1_probability_invariants(),
            "c2" => c2_oracle_equivalence(),
            "c3" => c3_gradient_check(),
            "c4" => c4_desk_synthetic(),
            "c5" | "c8" => {
                let run = match pruning_run.take() {
                    Some(run) => Ok(run),
                    None => gaussian_run(3, 4, 1),
                };
                match run {
                    Ok(run) => {
                        let out = if c.id == "c5" {
                            c5_pruning(&run.0, &run.1, &run.2)
                        } else {
                            c8_learning_curve(&run.0)
                        };
                        pruning_run = Some(run);
                        out
                    }
                    Err(e) => Err(e),
                }
            }
            "c6a" => c6_mnist_substitute(),
            "c6b" => c6_full_profile(),
            "c7" => c7_level_range_gradients(),
            _ => unreachable!(),
        };
        all &= report(c, started, result);
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
