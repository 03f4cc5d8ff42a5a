use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{NodeId, Tape};
use crate::error::Result;

/// Outcome of a finite-difference check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
}

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn evaluate<F>(store: &ParamStore, loss_fn: &F) -> Result<f64>
where
    F: Fn(&mut Tape) -> Result<NodeId>,
{
    let mut tape = Tape::new(store.values());
    let loss = loss_fn(&mut tape)?;
    Ok(tape.value(loss).data()[0])
}

/// Compare backward gradients of `loss_fn` against central differences with
/// step `h`, on at most `max_per_param` entries of each parameter (sampled
/// with `seed` when a parameter is larger).
///
/// `loss_fn` is evaluated many times and must be deterministic; anything
/// random inside it has to be re-seeded on every call.
pub fn grad_check<F>(
    store: &mut ParamStore,
    h: f64,
    max_per_param: usize,
    seed: u64,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape) -> Result<NodeId>,
{
    store.zero_grads();
    {
        let (values, grads) = store.split_mut();
        let mut tape = Tape::new(values);
        let loss = loss_fn(&mut tape)?;
        tape.backward(loss, grads)?;
    }
    let analytic: Vec<Vec<f64>> = store.grads.iter().map(|g| g.data().to_vec()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    for id in store.ids().collect::<Vec<ParamId>>() {
        let len = store.value(id).len();
        let entries: Vec<usize> = if len <= max_per_param {
            (0..len).collect()
        } else {
            let mut picked = sample(&mut rng, len, max_per_param).into_vec();
            picked.sort_unstable();
            picked
        };
        for i in entries {
            let original = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = original + h;
            let plus = evaluate(store, &loss_fn)?;
            store.value_mut(id).data_mut()[i] = original - h;
            let minus = evaluate(store, &loss_fn)?;
            store.value_mut(id).data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic[id.index()][i], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((store.name(id).to_owned(), i));
            }
        }
    }
    Ok(report)
}

/// Step used by [`layer_family_checks`].
pub const SUITE_STEP: f64 = 1e-6;
/// Entries sampled per parameter by [`layer_family_checks`].
pub const SUITE_SAMPLES: usize = 30;

fn uniform(
    store: &mut ParamStore,
    name: &str,
    shape: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<ParamId> {
    // Unit-scale values keep every relu and max away from its kink.
    store.add_uniform(name, shape, 1, rng)
}

fn weights(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    use rand::Rng;
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Finite-difference checks of every differentiable op family plus a
/// two-layer dense block, each on freshly seeded random parameters.
pub fn layer_family_checks(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    use rand::SeedableRng;
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut s = ParamStore::new();
    let x = uniform(&mut s, "x", &[3, 6], &mut rng)?;
    let w = uniform(&mut s, "w", &[4, 6], &mut rng)?;
    let b = uniform(&mut s, "b", &[4], &mut rng)?;
    let r = grad_check(&mut s, SUITE_STEP, SUITE_SAMPLES, seed, |t| {
        let (xi, wi, bi) = (t.param(x), t.param(w), t.param(b));
        let y = t.linear(xi, wi, bi)?;
        t.softmax_xent(y, &[0, 3, 1])
    })?;
    out.push(("linear+softmax_xent", r));

    let mut s = ParamStore::new();
    let x = uniform(&mut s, "x", &[2, 3, 9], &mut rng)?;
    let w = uniform(&mut s, "w", &[4, 3, 3], &mut rng)?;
    let b = uniform(&mut s, "b", &[4], &mut rng)?;
    let ws = weights(2 * 4 * 4, &mut rng);
    let r = grad_check(&mut s, SUITE_STEP, SUITE_SAMPLES, seed, |t| {
        let (xi, wi, bi) = (t.param(x), t.param(w), t.param(b));
        let y = t.conv1d(xi, wi, bi, 2)?;
        t.weighted_sum(y, ws.clone())
    })?;
    out.push(("conv1d", r));

    let mut s = ParamStore::new();
    let x = uniform(&mut s, "x", &[2, 2, 5, 8], &mut rng)?;
    let w = uniform(&mut s, "w", &[3, 2, 3, 2], &mut rng)?;
    let b = uniform(&mut s, "b", &[3], &mut rng)?;
    let ws = weights(2 * 3 * 3 * 4, &mut rng);
    let r = grad_check(&mut s, SUITE_STEP, SUITE_SAMPLES, seed, |t| {
        let (xi, wi, bi) = (t.param(x), t.param(w), t.param(b));
        let y = t.conv2d(xi, wi, bi, 1, 2)?;
        t.weighted_sum(y, ws.clone())
    })?;
    out.push(("conv2d_stride2", r));

    let mut s = ParamStore::new();
    let x = uniform(&mut s, "x", &[2, 3, 4, 6], &mut rng)?;
    let ws = weights(2 * 3 * 2 * 3, &mut rng);
    let r = grad_check(&mut s, SUITE_STEP, SUITE_SAMPLES, seed, |t| {
        let xi = t.param(x);
        let r = t.relu(xi);
        let p = t.avg_pool2d(r, 2, 2)?;
        t.weighted_sum(p, ws.clone())
    })?;
    out.push(("relu+avg_pool2d", r));

    let mut s = ParamStore::new();
    let x = uniform(&mut s, "x", &[2, 3, 7], &mut rng)?;
    let ws = weights(2 * 3 * 2, &mut rng);
    let r = grad_check(&mut s, SUITE_STEP, SUITE_SAMPLES, seed, |t| {
        let xi = t.param(x);
        let p = t.max_pool1d(xi, 3)?;
        t.weighted_sum(p, ws.clone())
    })?;
    out.push(("max_pool1d", r));

    let mut s = ParamStore::new();
    let a = uniform(&mut s, "a", &[2, 2, 3, 3], &mut rng)?;
    let c = uniform(&mut s, "c", &[2, 1, 5, 4], &mut rng)?;
    let ws = weights(2 * 3 * 5 * 4, &mut rng);
    let r = grad_check(&mut s, SUITE_STEP, SUITE_SAMPLES, seed, |t| {
        let (ai, ci) = (t.param(a), t.param(c));
        let padded = t.pad2d(ai, [1, 1, 0, 1])?;
        let joined = t.concat_channels(padded, ci)?;
        let f = t.flatten(joined);
        let mut mask_rng = ChaCha8Rng::seed_from_u64(seed);
        let d = t.dropout(f, 0.5, &mut mask_rng, true)?;
        t.weighted_sum(d, ws.clone())
    })?;
    out.push(("pad2d+concat+flatten+dropout", r));

    let mut s = ParamStore::new();
    let table = uniform(&mut s, "table", &[4, 6], &mut rng)?;
    let indices = [
        Some(1),
        Some(5),
        None,
        Some(1),
        Some(0),
        Some(3),
        Some(2),
        None,
    ];
    let ws = weights(2 * 4 * 4, &mut rng);
    let r = grad_check(&mut s, SUITE_STEP, SUITE_SAMPLES, seed, |t| {
        let ti = t.param(table);
        let e = t.embedding(ti, &indices, 4)?;
        t.weighted_sum(e, ws.clone())
    })?;
    out.push(("embedding", r));

    let mut s = ParamStore::new();
    let x = uniform(&mut s, "x", &[2, 3, 4, 4], &mut rng)?;
    let w1 = uniform(&mut s, "w1", &[2, 3, 3, 2], &mut rng)?;
    let b1 = uniform(&mut s, "b1", &[2], &mut rng)?;
    let w2 = uniform(&mut s, "w2", &[2, 5, 3, 2], &mut rng)?;
    let b2 = uniform(&mut s, "b2", &[2], &mut rng)?;
    let fc = uniform(&mut s, "fc", &[3, 28], &mut rng)?;
    let fb = uniform(&mut s, "fb", &[3], &mut rng)?;
    let r = grad_check(&mut s, SUITE_STEP, SUITE_SAMPLES, seed, |t| {
        let mut h = t.param(x);
        for (w, b) in [(w1, b1), (w2, b2)] {
            let padded = t.pad2d(h, [1, 1, 0, 1])?;
            let (wi, bi) = (t.param(w), t.param(b));
            let c = t.conv2d(padded, wi, bi, 1, 1)?;
            let r = t.relu(c);
            h = t.concat_channels(h, r)?;
        }
        let pooled = t.avg_pool2d(h, 2, 2)?;
        let f = t.flatten(pooled);
        let (fi, fbi) = (t.param(fc), t.param(fb));
        let y = t.linear(f, fi, fbi)?;
        t.softmax_xent(y, &[1, 2])
    })?;
    out.push(("dense_block", r));

    Ok(out)
}
