//! Central finite differences against reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::param::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Default finite-difference step.
pub const GRAD_CHECK_STEP: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check at most this many entries per parameter tensor (seeded sample);
    /// `None` checks every entry.
    pub max_entries_per_param: Option<usize>,
    pub seed: u64,
    /// Lower bound on the relative-error denominator. Entries whose true
    /// gradient is structurally zero are then compared in absolute terms.
    pub denom_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: GRAD_CHECK_STEP, max_entries_per_param: None, seed: 0, denom_floor: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `name[index]` of the entry with the largest error.
    pub worst: String,
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
}

fn eval<F>(store: &ParamStore<f64>, f: &F) -> Result<(Tape<f64>, Var)>
where
    F: Fn(&ParamStore<f64>, &mut Tape<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(store, &mut tape)?;
    let v = tape.value(loss).item();
    if !v.is_finite() {
        return Err(Error::NonFinite("grad_check loss".into()));
    }
    Ok((tape, loss))
}

/// Compare the tape gradient of the scalar built by `f` with central
/// differences for every trainable parameter. The relative error of one
/// entry is `|a - n| / max(|a|, |n|, denom_floor)`.
pub fn grad_check<F>(store: &ParamStore<f64>, opts: &GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore<f64>, &mut Tape<f64>) -> Result<Var>,
{
    let (tape, loss) = eval(store, &f)?;
    let grads = tape.backward(loss)?;
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = store.clone();
    let mut report = GradCheckReport { max_rel_err: 0.0, worst: String::new(), analytic: 0.0, numeric: 0.0, entries_checked: 0 };
    let ids: Vec<ParamId> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in ids {
        let numel = store.value(id).numel();
        let entries: Vec<usize> = match opts.max_entries_per_param {
            Some(m) if m < numel => {
                let mut e = sample(&mut rng, numel, m).into_vec();
                e.sort_unstable();
                e
            }
            _ => (0..numel).collect(),
        };
        for i in entries {
            let orig = store.value(id).data()[i];
            work.value_mut(id).data_mut()[i] = orig + opts.step;
            let (t, l) = eval(&work, &f)?;
            let plus = t.value(l).item();
            work.value_mut(id).data_mut()[i] = orig - opts.step;
            let (t, l) = eval(&work, &f)?;
            let minus = t.value(l).item();
            work.value_mut(id).data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * opts.step);
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[i]);
            let denom = analytic.abs().max(numeric.abs()).max(opts.denom_floor);
            let err = (analytic - numeric).abs() / denom;
            report.entries_checked += 1;
            if err > report.max_rel_err || report.worst.is_empty() {
                report.max_rel_err = err;
                report.worst = format!("{}[{i}]", store.get(id).name);
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
