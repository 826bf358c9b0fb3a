//! Sampled softmax over mixed negatives and the category reconstruction term.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::linalg;
use crate::real::Real;

#[derive(Debug, Clone, PartialEq)]
pub enum LossError {
    NoNegatives,
    NonFinite,
    Shape(&'static str),
}

impl fmt::Display for LossError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossError::NoNegatives => f.write_str("sampled softmax needs at least one negative per query"),
            LossError::NonFinite => f.write_str("non-finite value in loss inputs"),
            LossError::Shape(what) => write!(f, "shape mismatch: {what}"),
        }
    }
}

impl core::error::Error for LossError {}

/// Product ids of every row, used to mask accidental hits.
#[derive(Debug, Clone, Copy)]
pub struct CandidateIds<'a> {
    pub queries: &'a [u32],
    pub targets: &'a [u32],
    pub negatives: &'a [u32],
}

#[derive(Debug, Clone, Copy)]
pub struct SoftmaxInputs<'a, F> {
    pub dim: usize,
    /// `B x dim`
    pub queries: &'a [F],
    /// `B x dim`; row `i` is the positive of query `i` and a negative for the rest.
    pub targets: &'a [F],
    /// `M x dim` uniformly sampled negatives.
    pub negatives: &'a [F],
    pub temperature: F,
    /// Log sampling probability per candidate (`B` in-batch, then `M` uniform),
    /// subtracted from the logits when present.
    pub logq: Option<&'a [F]>,
    /// When present, a candidate carrying query `i`'s target id (other than
    /// the positive itself) or query `i`'s own id is excluded from its
    /// partition function.
    pub mask: Option<CandidateIds<'a>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxOutput<F> {
    /// Mean cross-entropy over queries.
    pub loss: F,
    pub d_queries: Vec<F>,
    pub d_targets: Vec<F>,
    pub d_negatives: Vec<F>,
}

/// Mean cross-entropy of each query against its own target, with all
/// in-batch targets and the uniform negatives as candidates.
pub fn sampled_softmax_loss<F: Real>(inp: &SoftmaxInputs<'_, F>) -> Result<SoftmaxOutput<F>, LossError> {
    let d = inp.dim;
    if d == 0 || inp.queries.len() % d != 0 || inp.negatives.len() % d != 0 {
        return Err(LossError::Shape("rows must have width dim"));
    }
    let b = inp.queries.len() / d;
    let m = inp.negatives.len() / d;
    if inp.targets.len() != b * d || b == 0 {
        return Err(LossError::Shape("one target per query"));
    }
    if b < 2 && m == 0 {
        return Err(LossError::NoNegatives);
    }
    let c = b + m;
    if let Some(lq) = inp.logq {
        if lq.len() != c {
            return Err(LossError::Shape("logq needs one entry per candidate"));
        }
    }
    if let Some(ids) = inp.mask {
        if ids.queries.len() != b || ids.targets.len() != b || ids.negatives.len() != m {
            return Err(LossError::Shape("one id per row"));
        }
    }
    let finite = |xs: &[F]| xs.iter().all(|v| v.is_finite());
    if !finite(inp.queries) || !finite(inp.targets) || !finite(inp.negatives) || !inp.temperature.is_finite() {
        return Err(LossError::NonFinite);
    }

    let candidate = |j: usize| -> &[F] {
        if j < b {
            &inp.targets[j * d..(j + 1) * d]
        } else {
            &inp.negatives[(j - b) * d..(j - b + 1) * d]
        }
    };
    let candidate_id = |ids: &CandidateIds<'_>, j: usize| if j < b { ids.targets[j] } else { ids.negatives[j - b] };
    let inv_t = F::ONE / inp.temperature;
    let inv_b = F::ONE / F::from_f64(b as f64);

    let mut d_queries = vec![F::ZERO; b * d];
    let mut d_targets = vec![F::ZERO; b * d];
    let mut d_negatives = vec![F::ZERO; m * d];
    let mut total = F::ZERO;
    let mut logits = vec![F::ZERO; c];
    let mut live = vec![true; c];
    for i in 0..b {
        let q = &inp.queries[i * d..(i + 1) * d];
        for j in 0..c {
            live[j] = match inp.mask {
                Some(ids) if j != i => {
                    let id = candidate_id(&ids, j);
                    id != ids.targets[i] && id != ids.queries[i]
                }
                _ => true,
            };
            let mut l = linalg::dot(q, candidate(j)) * inv_t;
            if let Some(lq) = inp.logq {
                l -= lq[j];
            }
            logits[j] = l;
        }
        let mut max = F::NEG_INFINITY;
        for j in 0..c {
            if live[j] {
                max = max.max(logits[j]);
            }
        }
        let mut z = F::ZERO;
        for j in 0..c {
            if live[j] {
                logits[j] = (logits[j] - max).exp();
                z += logits[j];
            } else {
                logits[j] = F::ZERO;
            }
        }
        // logits now hold unnormalised probabilities.
        let positive = logits[i];
        total += z.ln() - positive.ln();
        let inv_z = F::ONE / z;
        let dq = &mut d_queries[i * d..(i + 1) * d];
        for j in 0..c {
            if !live[j] {
                continue;
            }
            let mut g = logits[j] * inv_z;
            if j == i {
                g -= F::ONE;
            }
            let g = g * inv_b * inv_t;
            if g == F::ZERO {
                continue;
            }
            linalg::axpy(g, candidate(j), dq);
            let dc = if j < b {
                &mut d_targets[j * d..(j + 1) * d]
            } else {
                &mut d_negatives[(j - b) * d..(j - b + 1) * d]
            };
            linalg::axpy(g, q, dc);
        }
    }
    let loss = total * inv_b;
    if !loss.is_finite() {
        return Err(LossError::NonFinite);
    }
    Ok(SoftmaxOutput { loss, d_queries, d_targets, d_negatives })
}

/// Mean squared error `|p - r|^2 / d'` and its gradients w.r.t. `p` and `r`.
pub fn reconstruction_loss<F: Real>(projection: &[F], target_row: &[F]) -> Result<(F, Vec<F>, Vec<F>), LossError> {
    if projection.len() != target_row.len() || projection.is_empty() {
        return Err(LossError::Shape("projection and category row widths differ"));
    }
    let n = F::from_f64(projection.len() as f64);
    let mut loss = F::ZERO;
    let mut d_proj = Vec::with_capacity(projection.len());
    for (&p, &r) in projection.iter().zip(target_row) {
        let diff = p - r;
        loss += diff * diff;
        d_proj.push(F::from_f64(2.0) * diff / n);
    }
    let d_row = d_proj.iter().map(|&g| -g).collect();
    Ok((loss / n, d_proj, d_row))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::standard_normal;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn inputs<'a>(q: &'a [f64], t: &'a [f64], n: &'a [f64], d: usize) -> SoftmaxInputs<'a, f64> {
        SoftmaxInputs { dim: d, queries: q, targets: t, negatives: n, temperature: 1.0, logq: None, mask: None }
    }

    #[test]
    fn single_query_against_its_antipode() {
        // logits {+1, -1}: loss = ln(1 + e^-2)
        let e1 = [1.0, 0.0];
        let out = sampled_softmax_loss(&inputs(&e1, &e1, &[-1.0, 0.0], 2)).unwrap();
        assert!((out.loss - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-12);
        assert!((out.loss - 0.1269).abs() < 1e-4);
    }

    #[test]
    fn orthogonal_candidates_give_log_of_candidate_count() {
        // Query e0 against positive e1, in-batch e2, negatives e3..e5: all logits 0.
        let d = 6;
        let unit = |k: usize| {
            let mut v = vec![0.0; d];
            v[k] = 1.0;
            v
        };
        let q = [unit(0), unit(0)].concat();
        let t = [unit(1), unit(2)].concat();
        let n = [unit(3), unit(4), unit(5)].concat();
        let out = sampled_softmax_loss(&inputs(&q, &t, &n, d)).unwrap();
        assert!((out.loss - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn needs_a_negative() {
        let e1 = [1.0, 0.0];
        assert_eq!(sampled_softmax_loss(&inputs(&e1, &e1, &[], 2)).unwrap_err(), LossError::NoNegatives);
        let bad = [f64::NAN, 0.0];
        assert_eq!(sampled_softmax_loss(&inputs(&bad, &e1, &e1, 2)).unwrap_err(), LossError::NonFinite);
    }

    #[test]
    fn accidental_hits_do_not_enter_the_partition_function() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = 4;
        let mut v = || (0..d).map(|_| standard_normal(&mut rng)).collect::<Vec<f64>>();
        let (q0, q1, t0, t1, n0) = (v(), v(), v(), v(), v());
        let q = [q0.clone(), q1.clone()].concat();
        let t = [t0.clone(), t1.clone()].concat();
        // Negative 1 duplicates target 0 (product 10).
        let n = [n0.clone(), t0.clone()].concat();
        let ids = CandidateIds { queries: &[1, 2], targets: &[10, 11], negatives: &[12, 10] };
        let masked = sampled_softmax_loss(&SoftmaxInputs { mask: Some(ids), ..inputs(&q, &t, &n, d) }).unwrap();
        // Reference: query 0 sees {t0, t1, n0}; query 1 sees {t1, t0, n0, t0}.
        let lse = |xs: &[f64]| xs.iter().map(|x| x.exp()).sum::<f64>().ln();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let l0 = lse(&[dot(&q0, &t0), dot(&q0, &t1), dot(&q0, &n0)]) - dot(&q0, &t0);
        let l1 = lse(&[dot(&q1, &t1), dot(&q1, &t0), dot(&q1, &n0), dot(&q1, &t0)]) - dot(&q1, &t1);
        assert!((masked.loss - (l0 + l1) / 2.0).abs() < 1e-12);
        // The masked duplicate receives no gradient from query 0.
        let unmasked = sampled_softmax_loss(&inputs(&q, &t, &n, d)).unwrap();
        assert!(masked.d_negatives[d..] != unmasked.d_negatives[d..]);
    }

    #[test]
    fn logq_shifts_logits() {
        let e1 = [1.0, 0.0];
        let lq = [0.0, 1.0];
        let out = sampled_softmax_loss(&SoftmaxInputs { logq: Some(&lq), ..inputs(&e1, &e1, &[-1.0, 0.0], 2) }).unwrap();
        assert!((out.loss - (1.0 + (-3.0f64).exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_values() {
        let v = [0.3, -0.2, 0.5];
        assert_eq!(reconstruction_loss(&v, &v).unwrap().0, 0.0);
        let mut row = vec![0.0; 16];
        row[3] = 1.0;
        let (loss, _, _) = reconstruction_loss(&[0.0; 16], &row).unwrap();
        assert!((loss - 1.0 / 16.0).abs() < 1e-15);
        assert!(reconstruction_loss(&[0.0; 3], &[0.0; 4]).is_err());
    }
}
