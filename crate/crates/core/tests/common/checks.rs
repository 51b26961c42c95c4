//! Finite-difference and sampling checks shared by the integration tests
//! and the acceptance runner.

use gaitgraph::autodiff::{Tape, Var};
use gaitgraph::data::SkeletonSequence;
use gaitgraph::gumbel::{gumbel_softmax, sample_gumbel, straight_through, Noise};
use gaitgraph::models::Model;
use gaitgraph::training::loss;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{central_difference, dense_normalize, relative_error, FD_STEP};

type Build = fn(&mut Tape, &[Var]) -> Var;

/// Builds `op` on leaves holding `inputs`, reduces with a fixed random
/// weighting, and returns the worst relative error between the tape gradient
/// and central differences over all input coordinates.
pub fn check_op(inputs: &[(Vec<usize>, Vec<f64>)], op: Build, rng: &mut ChaCha8Rng) -> f64 {
    let weights: Vec<f64> = {
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|(s, d)| t.leaf_from(s.clone(), d.clone()).unwrap()).collect();
        let out = op(&mut t, &vars);
        (0..t.value(out).len()).map(|_| rng.gen_range(-1.0..1.0)).collect()
    };
    let eval = |values: &[Vec<f64>]| -> (f64, Vec<Vec<f64>>) {
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .zip(values)
            .map(|((s, _), d)| t.leaf_from(s.clone(), d.clone()).unwrap())
            .collect();
        let out = op(&mut t, &vars);
        let shape = t.shape(out).to_vec();
        let w = t.leaf_from(shape, weights.clone()).unwrap();
        let prod = t.mul(out, w).unwrap();
        let total = t.sum(prod);
        t.backward(total).unwrap();
        (t.value(total)[0], vars.iter().map(|&v| t.grad(v).to_vec()).collect())
    };
    let base: Vec<Vec<f64>> = inputs.iter().map(|(_, d)| d.clone()).collect();
    let (_, grads) = eval(&base);
    let mut worst = 0.0f64;
    for (k, g) in grads.iter().enumerate() {
        for i in 0..g.len() {
            let numeric = central_difference(&base[k], i, &mut |x| {
                let mut probe = base.clone();
                probe[k] = x.to_vec();
                eval(&probe).0
            });
            worst = worst.max(relative_error(g[i], numeric));
        }
    }
    worst
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> (Vec<usize>, Vec<f64>) {
    let n = shape.iter().product();
    (shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

/// Worst relative error per autodiff op over `points` random inputs each.
pub fn op_gradient_suite(points: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = vec![];
    let ops: Vec<(&'static str, Vec<(Vec<usize>, f64, f64)>, Build)> = vec![
        ("matmul", vec![(vec![3, 4], -1.0, 1.0), (vec![4, 2], -1.0, 1.0)], |t, v| t.matmul(v[0], v[1]).unwrap()),
        ("add", vec![(vec![2, 3], -1.0, 1.0), (vec![2, 3], -1.0, 1.0)], |t, v| t.add(v[0], v[1]).unwrap()),
        ("add_scalar", vec![(vec![2, 3], -1.0, 1.0), (vec![], -1.0, 1.0)], |t, v| t.add(v[0], v[1]).unwrap()),
        ("sub", vec![(vec![4], -1.0, 1.0), (vec![4], -1.0, 1.0)], |t, v| t.sub(v[0], v[1]).unwrap()),
        ("mul", vec![(vec![2, 3], -1.0, 1.0), (vec![2, 3], -1.0, 1.0)], |t, v| t.mul(v[0], v[1]).unwrap()),
        ("scale", vec![(vec![5], -1.0, 1.0)], |t, v| t.scale(v[0], -2.5)),
        ("relu", vec![(vec![6], -1.0, 1.0)], |t, v| t.relu(v[0])),
        ("exp", vec![(vec![5], -2.0, 2.0)], |t, v| t.exp(v[0])),
        ("log", vec![(vec![5], 0.2, 3.0)], |t, v| t.log(v[0]).unwrap()),
        ("sum", vec![(vec![2, 3], -1.0, 1.0)], |t, v| t.sum(v[0])),
        ("mean", vec![(vec![2, 3], -1.0, 1.0)], |t, v| t.mean(v[0])),
        ("softmax", vec![(vec![3, 4], -2.0, 2.0)], |t, v| t.softmax(v[0], 1).unwrap()),
        ("softmax_axis0", vec![(vec![3, 4], -2.0, 2.0)], |t, v| t.softmax(v[0], 0).unwrap()),
        ("cross_entropy", vec![(vec![3, 2], -2.0, 2.0)], |t, v| t.cross_entropy(v[0], &[0, 1, 1]).unwrap()),
        ("reshape", vec![(vec![2, 3], -1.0, 1.0)], |t, v| t.reshape(v[0], vec![3, 2]).unwrap()),
        ("transpose", vec![(vec![2, 3], -1.0, 1.0)], |t, v| t.transpose(v[0]).unwrap()),
        ("node_mix", vec![(vec![3, 3], 0.0, 1.0), (vec![4, 3, 2], -1.0, 1.0)], |t, v| t.node_mix(v[0], v[1]).unwrap()),
        ("temporal_conv", vec![(vec![6, 2, 3], -1.0, 1.0), (vec![3, 3], -1.0, 1.0)], |t, v| {
            t.temporal_conv(v[0], v[1]).unwrap()
        }),
        ("mean_rows", vec![(vec![3, 2, 4], -1.0, 1.0)], |t, v| t.mean_rows(v[0]).unwrap()),
        ("gather", vec![(vec![6], -1.0, 1.0)], |t, v| t.gather(v[0], &[4, 0, 0, 2]).unwrap()),
        ("scatter", vec![(vec![3], -1.0, 1.0)], |t, v| {
            t.scatter(v[0], &[(0, 1), (0, 3), (1, 2), (2, 5)], vec![2, 3]).unwrap()
        }),
        ("concat", vec![(vec![2], -1.0, 1.0), (vec![3], -1.0, 1.0)], |t, v| t.concat(v, vec![5]).unwrap()),
    ];
    for (name, shapes, op) in ops {
        let mut worst = 0.0f64;
        for _ in 0..points {
            let inputs: Vec<_> = shapes.iter().map(|(s, lo, hi)| random(&mut rng, s, *lo, *hi)).collect();
            worst = worst.max(check_op(&inputs, op, &mut rng));
        }
        results.push((name, worst));
    }
    results
}

/// Full training loss (upstream, relaxed mask with frozen noise, downstream,
/// cross-entropy plus sparsity) and its gradient per parameter tensor.
pub fn pipeline_loss(
    model: &Model,
    batch: &[&SkeletonSequence],
    noise: &[Vec<f64>],
    tau: f64,
    sparsity: f64,
) -> (f64, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape).unwrap();
    let mut logits = vec![];
    let mut probs = vec![];
    for (seq, g) in batch.iter().zip(noise) {
        let out = model
            .forward_instance(&mut tape, &bound, seq, tau, false, &mut Noise::Fixed(g))
            .unwrap();
        logits.push(out.logits);
        probs.extend(out.mask.map(|m| m.keep_prob));
    }
    let stacked = tape.concat(&logits, vec![batch.len(), 2]).unwrap();
    let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
    let total = loss(&mut tape, stacked, &labels, &probs, sparsity).unwrap();
    tape.backward(total).unwrap();
    let grads = bound.vars().iter().map(|&v| tape.grad(v).to_vec()).collect();
    (tape.value(total)[0], grads)
}

pub struct EndToEndReport {
    /// `(tensor, index, analytic, numeric, rel_err)` for every accepted point.
    pub points: Vec<(usize, usize, f64, f64, f64)>,
    /// Points where a relu kink fell inside the probe interval.
    pub kinks: usize,
}

impl EndToEndReport {
    pub fn worst(&self) -> f64 {
        self.points.iter().map(|p| p.4).fold(0.0, f64::max)
    }
}

/// Checks `count` random coordinates in upstream tensors and `count` in
/// downstream tensors against central differences with step `FD_STEP`.
///
/// A coordinate whose forward and backward differences disagree, with the
/// analytic gradient matching one of them, straddles a relu kink; the
/// central difference is meaningless there, so it is counted in `kinks`
/// and replaced by a fresh coordinate. Any other mismatch is reported.
pub fn end_to_end_check(model: &Model, batch: &[&SkeletonSequence], count: usize, seed: u64) -> EndToEndReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let edges = model.config.num_edges();
    let noise: Vec<Vec<f64>> = batch.iter().map(|_| sample_gumbel(2 * edges, &mut rng)).collect();
    let (tau, sparsity) = (1.5, 0.3);
    let (base_loss, grads) = pipeline_loss(model, batch, &noise, tau, sparsity);
    let n_tensors = grads.len();
    let mut report = EndToEndReport { points: vec![], kinks: 0 };
    for group in 0..2 {
        let mut accepted = 0;
        while accepted < count {
            assert!(report.kinks < 10 * count, "too many kinks");
            // the five upstream tensors come first
            let tensor = if group == 0 { rng.gen_range(0..5) } else { rng.gen_range(5..n_tensors) };
            let index = rng.gen_range(0..grads[tensor].len());
            let mut probe = model.clone();
            let base = probe.tensors_mut()[tensor].data[index];
            let mut at = |x: f64| {
                probe.tensors_mut()[tensor].data[index] = x;
                pipeline_loss(&probe, batch, &noise, tau, sparsity).0
            };
            let (up, down) = (at(base + FD_STEP), at(base - FD_STEP));
            let numeric = (up - down) / (2.0 * FD_STEP);
            let analytic = grads[tensor][index];
            let err = relative_error(analytic, numeric);
            if err >= 1e-4 {
                let forward = (up - base_loss) / FD_STEP;
                let backward = (base_loss - down) / FD_STEP;
                let one_sided = relative_error(analytic, forward).min(relative_error(analytic, backward));
                if relative_error(forward, backward) >= 1e-4 && one_sided < 1e-4 {
                    report.kinks += 1;
                    continue;
                }
            }
            report.points.push((tensor, index, analytic, numeric, err));
            accepted += 1;
        }
    }
    report
}

/// Empirical frequency of the hard sample's class 0 versus
/// `softmax(logits)[0]`, over `draws` straight-through samples.
pub fn gumbel_max_frequencies(logits: [f64; 2], tau: f64, draws: usize, seed: u64) -> ([f64; 2], [f64; 2]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // all draws in one [draws, 2] tensor
    let mut tape = Tape::new();
    let flat: Vec<f64> = (0..draws).flat_map(|_| logits).collect();
    let l = tape.leaf_from(vec![draws, 2], flat).unwrap();
    let soft = gumbel_softmax(&mut tape, l, tau, &mut Noise::Sample(&mut rng)).unwrap();
    let hard = straight_through(&mut tape, soft).unwrap();
    let values = tape.value(hard);
    let mut counts = [0.0; 2];
    for row in values.chunks(2) {
        counts[0] += row[0];
        counts[1] += row[1];
    }
    let z = logits[0].exp() + logits[1].exp();
    (
        [counts[0] / draws as f64, counts[1] / draws as f64],
        [logits[0].exp() / z, logits[1].exp() / z],
    )
}

/// Worst `|hard_grad - soft_grad|` and whether every forward row was one-hot,
/// over `cases` random logits/noise/upstream-gradient triples.
pub fn straight_through_cases(cases: usize, seed: u64) -> (bool, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut one_hot, mut worst) = (true, 0.0f64);
    for _ in 0..cases {
        let k = rng.gen_range(2..6);
        let rows = rng.gen_range(1..4);
        let logits: Vec<f64> = (0..rows * k).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let noise = sample_gumbel(rows * k, &mut rng);
        let upstream: Vec<f64> = (0..rows * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let tau = rng.gen_range(0.1..5.0);
        let run = |hard: bool| {
            let mut t = Tape::new();
            let l = t.leaf_from(vec![rows, k], logits.clone()).unwrap();
            let soft = gumbel_softmax(&mut t, l, tau, &mut Noise::Fixed(&noise)).unwrap();
            let out = if hard { straight_through(&mut t, soft).unwrap() } else { soft };
            let w = t.leaf_from(vec![rows, k], upstream.clone()).unwrap();
            let p = t.mul(out, w).unwrap();
            let s = t.sum(p);
            t.backward(s).unwrap();
            (t.value(out).to_vec(), t.grad(l).to_vec())
        };
        let (hard_out, hard_grad) = run(true);
        let (soft_out, soft_grad) = run(false);
        for (row, soft_row) in hard_out.chunks(k).zip(soft_out.chunks(k)) {
            let ones = row.iter().filter(|&&x| x == 1.0).count();
            let zeros = row.iter().filter(|&&x| x == 0.0).count();
            let arg = (0..k).fold(0, |b, i| if soft_row[i] > soft_row[b] { i } else { b });
            one_hot &= ones == 1 && zeros == k - 1 && row[arg] == 1.0;
        }
        for (a, b) in hard_grad.iter().zip(&soft_grad) {
            worst = worst.max((a - b).abs());
        }
    }
    (one_hot, worst)
}

/// Worst absolute error of `normalize_adjacency` against the dense formula,
/// and whether all outputs were symmetric with entries in [0, 1].
pub fn normalization_cases(graphs: usize, seed: u64) -> (f64, bool) {
    use gaitgraph::graph::{normalize_adjacency, AdjacencyMatrix};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut well_formed) = (0.0f64, true);
    for n in 0..graphs {
        let v = rng.gen_range(1..=8);
        let density = rng.gen_range(0.0..1.0);
        let weighted = n % 2 == 1;
        let mut a = vec![vec![0.0; v]; v];
        for i in 0..v {
            for j in i + 1..v {
                if rng.gen_bool(density) {
                    let w = if weighted { rng.gen_range(0.0..1.0) } else { 1.0 };
                    a[i][j] = w;
                    a[j][i] = w;
                }
            }
        }
        let m = AdjacencyMatrix::from_entries(v, a.iter().flatten().copied().collect()).unwrap();
        let got = normalize_adjacency(&m);
        let want = dense_normalize(&a);
        for i in 0..v {
            for j in 0..v {
                let g = got.get(i, j);
                worst = worst.max((g - want[i][j]).abs());
                well_formed &= g == got.get(j, i) && (0.0..=1.0).contains(&g);
            }
        }
    }
    (worst, well_formed)
}
