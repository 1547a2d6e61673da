//! Central finite-difference gradient checker.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::array::Array;
use super::graph::{Graph, TensorId};

/// Checks the analytic gradients of `build` (which must map the inputs to a
/// scalar) against central finite differences, coordinate by coordinate.
/// Returns the maximum relative error
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn grad_check<F>(inputs: &[Array], build: F, eps: f64) -> f64
where
    F: Fn(&mut Graph, &[TensorId]) -> TensorId,
{
    let eval = |xs: &[Array]| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<TensorId> = xs.iter().map(|a| g.leaf(a.clone(), false)).collect();
        let loss = build(&mut g, &ids);
        g.scalar_value(loss)
    };

    let mut g = Graph::new();
    let ids: Vec<TensorId> = inputs.iter().map(|a| g.leaf(a.clone(), true)).collect();
    let loss = build(&mut g, &ids);
    g.backward(loss).expect("grad_check loss must be scalar");
    let analytic: Vec<Array> = ids
        .iter()
        .zip(inputs)
        .map(|(id, a)| g.grad(*id).cloned().unwrap_or_else(|| Array::zeros(a.shape())))
        .collect();

    let mut worst = 0.0f64;
    let mut work: Vec<Array> = inputs.to_vec();
    for t in 0..inputs.len() {
        for i in 0..inputs[t].numel() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + eps;
            let fp = eval(&work);
            work[t].data_mut()[i] = orig - eps;
            let fm = eval(&work);
            work[t].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[t].data()[i];
            let rel = (a - numeric).abs() / f64::max(1e-8, a.abs() + numeric.abs());
            worst = worst.max(rel);
        }
    }
    worst
}

/// One entry of the op check suite: name, measured max relative error, bound.
pub struct GradCheckResult {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub bound: f64,
}

impl GradCheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.bound
    }
}

/// Runs the finite-difference check over every differentiable op, on fixed
/// seeded inputs (ReLU and the L1 kink are checked away from zero).
pub fn op_gradcheck_suite() -> Vec<GradCheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut rand_arr = |shape: &[usize], lo: f64, hi: f64| {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Array::from_vec(shape, data).expect("shape matches")
    };
    let x = rand_arr(&[1, 1, 4, 4], 0.1, 1.0);
    let y = rand_arr(&[1, 1, 4, 4], -1.0, -0.1);
    let w = rand_arr(&[2, 1, 3, 3], -0.5, 0.5);
    let b = rand_arr(&[2], -0.5, 0.5);
    let weight_field =
        Array::from_vec(&[1, 1, 4, 4], (0..16).map(|i| 1.0 + (i % 3) as f64).collect())
            .expect("shape matches");

    type Build = Box<dyn Fn(&mut Graph, &[TensorId]) -> TensorId>;
    let cases: Vec<(&'static str, Build)> = vec![
        ("conv2d", Box::new(|g, ids| {
            let c = g.conv2d(ids[0], ids[2], Some(ids[3]), 1).unwrap();
            g.mean(c)
        })),
        ("conv2d dilation 2", Box::new(|g, ids| {
            let c = g.conv2d(ids[0], ids[2], Some(ids[3]), 2).unwrap();
            g.mean(c)
        })),
        ("maxpool2", Box::new(|g, ids| {
            let p = g.maxpool2(ids[0]).unwrap();
            g.mean(p)
        })),
        ("upsample_nearest2", Box::new(|g, ids| {
            let u = g.upsample_nearest2(ids[0]).unwrap();
            g.mean(u)
        })),
        ("concat_channels", Box::new(|g, ids| {
            let c = g.concat_channels(ids[0], ids[1]).unwrap();
            g.mean(c)
        })),
        ("relu", Box::new(|g, ids| {
            let r = g.relu(ids[0]);
            g.mean(r)
        })),
        ("tanh", Box::new(|g, ids| {
            let t = g.tanh_act(ids[0]);
            g.mean(t)
        })),
        ("gaussian_noise", Box::new(|g, ids| {
            let n = g.gaussian_noise(ids[0], 0.2, true, 99);
            g.mean(n)
        })),
        ("triplicate", Box::new(|g, ids| {
            let t = g.triplicate(ids[0], [0.1, -0.2, 0.0], [1.0, 2.0, 0.5]).unwrap();
            g.mean(t)
        })),
        ("reduce_l1", Box::new(|g, ids| g.reduce_l1(ids[0], ids[1], None).unwrap())),
        ("reduce_l1 weighted", Box::new(move |g, ids| {
            g.reduce_l1(ids[0], ids[1], Some(&weight_field)).unwrap()
        })),
        ("reduce_mse", Box::new(|g, ids| g.reduce_mse(ids[0], ids[1]).unwrap())),
        ("add + scale", Box::new(|g, ids| {
            let s = g.scale(ids[1], -0.7);
            let a = g.add(ids[0], s).unwrap();
            g.mean(a)
        })),
    ];
    cases
        .into_iter()
        .map(|(name, build)| GradCheckResult {
            name,
            max_rel_error: grad_check(&[x.clone(), y.clone(), w.clone(), b.clone()], build, 1e-5),
            bound: 1e-4,
        })
        .collect()
}
