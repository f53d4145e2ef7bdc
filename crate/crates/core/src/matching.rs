//! Query-token to frame-token matching.
//!
//! Logits are temperature-scaled cosines between each query ("find") token
//! and each pooled frame token. The loss is a positively weighted binary
//! cross-entropy over a caller-supplied set of valid pairs.

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::curve::{sigmoid, RawScoreCurve};
use crate::error::{invalid, Result};

pub const DEFAULT_TEMPERATURE: f64 = 0.07;
pub const DEFAULT_POSITIVE_WEIGHT: f64 = 2.0;

/// Floor applied to probabilities before taking logs.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    find_tokens: Array2<f64>,
    frame_tokens: Array2<f64>,
    labels: Array2<u8>,
    valid: Array2<bool>,
    temperature: f64,
    positive_weight: f64,
}

impl TokenMatrix {
    /// `valid_pairs = None` means every `(find, frame)` pair is valid.
    pub fn new(
        find_tokens: Array2<f64>,
        frame_tokens: Array2<f64>,
        labels: Array2<u8>,
        valid_pairs: Option<&[(usize, usize)]>,
        temperature: f64,
        positive_weight: f64,
    ) -> Result<Self> {
        let (nf, c) = find_tokens.dim();
        let (lt, c2) = frame_tokens.dim();
        if nf == 0 || lt == 0 || c == 0 {
            return invalid("token matrices must be non-empty");
        }
        if c != c2 {
            return invalid(format!(
                "find tokens have dim {c}, frame tokens have dim {c2}"
            ));
        }
        if labels.dim() != (nf, lt) {
            return invalid(format!(
                "labels are {:?}, expected ({nf}, {lt})",
                labels.dim()
            ));
        }
        if labels.iter().any(|&y| y > 1) {
            return invalid("labels must be 0 or 1");
        }
        if !(temperature.is_finite() && temperature > 0.0) {
            return invalid(format!("temperature must be positive, got {temperature}"));
        }
        if !(positive_weight.is_finite() && positive_weight >= 0.0) {
            return invalid(format!(
                "positive weight must be non-negative, got {positive_weight}"
            ));
        }
        for (name, m) in [("find", &find_tokens), ("frame", &frame_tokens)] {
            for (i, row) in m.rows().into_iter().enumerate() {
                let n = norm(row);
                if !(n.is_finite() && n > 0.0) {
                    return invalid(format!("{name} token {i} has zero or non-finite norm"));
                }
            }
        }
        let valid = match valid_pairs {
            None => Array2::from_elem((nf, lt), true),
            Some(pairs) => {
                let mut v = Array2::from_elem((nf, lt), false);
                for &(i, j) in pairs {
                    if i >= nf || j >= lt {
                        return invalid(format!("valid pair ({i}, {j}) outside ({nf}, {lt})"));
                    }
                    v[[i, j]] = true;
                }
                v
            }
        };
        Ok(Self {
            find_tokens,
            frame_tokens,
            labels,
            valid,
            temperature,
            positive_weight,
        })
    }

    pub fn find_count(&self) -> usize {
        self.find_tokens.nrows()
    }

    pub fn frame_count(&self) -> usize {
        self.frame_tokens.nrows()
    }

    pub fn find_tokens(&self) -> &Array2<f64> {
        &self.find_tokens
    }

    pub fn frame_tokens(&self) -> &Array2<f64> {
        &self.frame_tokens
    }

    pub fn labels(&self) -> &Array2<u8> {
        &self.labels
    }

    pub fn valid_mask(&self) -> &Array2<bool> {
        &self.valid
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn positive_weight(&self) -> f64 {
        self.positive_weight
    }
}

fn norm(row: ArrayView1<f64>) -> f64 {
    row.dot(&row).sqrt()
}

/// Mean of each frame's token group.
pub fn pool_frame_tokens(groups: &[Vec<Vec<f64>>]) -> Result<Array2<f64>> {
    let Some(dim) = groups.first().and_then(|g| g.first()).map(Vec::len) else {
        return invalid("pooling needs at least one non-empty group");
    };
    let mut out = Array2::zeros((groups.len(), dim));
    for (t, group) in groups.iter().enumerate() {
        if group.is_empty() {
            return invalid(format!("frame {t} has no tokens to pool"));
        }
        let mut row = out.row_mut(t);
        for v in group {
            if v.len() != dim {
                return invalid(format!(
                    "frame {t} has a token of dim {}, expected {dim}",
                    v.len()
                ));
            }
            row.iter_mut().zip(v).for_each(|(r, x)| *r += x);
        }
        row.mapv_inplace(|x| x / group.len() as f64);
    }
    Ok(out)
}

/// `l[i, j] = cos(find_i, frame_j) / tau`.
pub fn similarity_matrix(tm: &TokenMatrix) -> Array2<f64> {
    let unit = |m: &Array2<f64>| {
        let mut m = m.clone();
        for mut row in m.axis_iter_mut(Axis(0)) {
            let n = norm(row.view());
            row.mapv_inplace(|x| x / n);
        }
        m
    };
    let f = unit(&tm.find_tokens);
    let v = unit(&tm.frame_tokens);
    let bound = 1.0 / tm.temperature;
    // Cosines can overshoot 1 by an ulp.
    f.dot(&v.t())
        .mapv(|c| (c / tm.temperature).clamp(-bound, bound))
}

fn check_logits(logits: &Array2<f64>, tm: &TokenMatrix) -> Result<f64> {
    if logits.dim() != tm.valid.dim() {
        return invalid(format!(
            "logits are {:?}, expected {:?}",
            logits.dim(),
            tm.valid.dim()
        ));
    }
    let count = tm.valid_count();
    if count == 0 {
        return invalid("the valid pair set is empty");
    }
    Ok(count as f64)
}

/// `-ln(max(sigmoid(x), LOG_CLAMP))`, computed as a softplus so that
/// values of sigmoid near one keep their precision.
fn neg_log_sigmoid(x: f64) -> f64 {
    if sigmoid(x) < LOG_CLAMP {
        return -LOG_CLAMP.ln();
    }
    if x >= 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

/// Mean weighted binary cross-entropy over the valid pairs.
pub fn find_loss(logits: &Array2<f64>, tm: &TokenMatrix) -> Result<f64> {
    let count = check_logits(logits, tm)?;
    let mut total = 0.0;
    for ((idx, &l), &ok) in logits.indexed_iter().zip(tm.valid.iter()) {
        if !ok {
            continue;
        }
        let term = if tm.labels[idx] == 1 {
            tm.positive_weight * neg_log_sigmoid(l)
        } else {
            // 1 - sigmoid(l) == sigmoid(-l), without cancellation.
            neg_log_sigmoid(-l)
        };
        total += term;
    }
    Ok(total / count)
}

/// Analytic derivative of [`find_loss`] with respect to each logit.
pub fn find_loss_grad(logits: &Array2<f64>, tm: &TokenMatrix) -> Result<Array2<f64>> {
    let count = check_logits(logits, tm)?;
    let mut grad = Array2::zeros(logits.dim());
    for ((idx, &l), g) in logits.indexed_iter().zip(grad.iter_mut()) {
        if !tm.valid[idx] {
            continue;
        }
        *g = if tm.labels[idx] == 1 {
            -tm.positive_weight * sigmoid(-l)
        } else {
            sigmoid(l)
        } / count;
    }
    Ok(grad)
}

/// Similarity row for one find token, ready for curve conditioning.
pub fn inference_scores(tm: &TokenMatrix, find_index: usize) -> Result<RawScoreCurve> {
    if find_index >= tm.find_count() {
        return invalid(format!(
            "find token {find_index} outside [0, {})",
            tm.find_count()
        ));
    }
    let single = TokenMatrix {
        find_tokens: tm.find_tokens.select(Axis(0), &[find_index]),
        frame_tokens: tm.frame_tokens.clone(),
        labels: tm.labels.select(Axis(0), &[find_index]),
        valid: tm.valid.select(Axis(0), &[find_index]),
        temperature: tm.temperature,
        positive_weight: tm.positive_weight,
    };
    RawScoreCurve::new(similarity_matrix(&single).row(0).to_vec())
}

/// Analytic gradient compared with central differences of the loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Relative error `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Denominator floor used by [`grad_check`]. Central differences of a loss
/// near 30 carry roundoff around 1e-9, so gradients below the floor are
/// judged on absolute error.
pub const GRAD_CHECK_FLOOR: f64 = 1e-5;

/// Central-difference step.
pub const DEFAULT_GRAD_STEP: f64 = 1e-5;

/// Compares the analytic gradient against central differences of the loss.
pub fn grad_check(logits: &Array2<f64>, tm: &TokenMatrix, step: f64) -> Result<GradCheck> {
    let analytic = find_loss_grad(logits, tm)?;
    let mut probe = logits.clone();
    let mut out = GradCheck {
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        checked: 0,
    };
    for (idx, &a) in analytic.indexed_iter() {
        let orig = probe[idx];
        probe[idx] = orig + step;
        let up = find_loss(&probe, tm)?;
        probe[idx] = orig - step;
        let down = find_loss(&probe, tm)?;
        probe[idx] = orig;
        let numeric = (up - down) / (2.0 * step);
        out.max_abs_err = out.max_abs_err.max((a - numeric).abs());
        out.max_rel_err = out
            .max_rel_err
            .max(relative_error(a, numeric, GRAD_CHECK_FLOOR));
        out.checked += 1;
    }
    Ok(out)
}

/// On-disk token file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenFile {
    pub find: Vec<Vec<f64>>,
    pub frames: Vec<Vec<f64>>,
    pub labels: Vec<Vec<u8>>,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_lambda_p")]
    pub lambda_p: f64,
    #[serde(default)]
    pub omega: Option<Vec<(usize, usize)>>,
}

fn default_tau() -> f64 {
    DEFAULT_TEMPERATURE
}

fn default_lambda_p() -> f64 {
    DEFAULT_POSITIVE_WEIGHT
}

fn to_array<T: Clone>(rows: &[Vec<T>], what: &str) -> Result<Array2<T>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return invalid(format!("{what} rows have inconsistent lengths"));
    }
    let flat: Vec<T> = rows.iter().flatten().cloned().collect();
    Array2::from_shape_vec((rows.len(), ncols), flat)
        .map_err(|e| crate::Error::Validation(e.to_string()))
}

impl TokenFile {
    pub fn into_matrix(self) -> Result<TokenMatrix> {
        TokenMatrix::new(
            to_array(&self.find, "find")?,
            to_array(&self.frames, "frames")?,
            to_array(&self.labels, "labels")?,
            self.omega.as_deref(),
            self.tau,
            self.lambda_p,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    fn single(l: f64, y: u8) -> (Array2<f64>, TokenMatrix) {
        let tm =
            TokenMatrix::new(array![[1.0]], array![[1.0]], array![[y]], None, 1.0, 2.0).unwrap();
        (array![[l]], tm)
    }

    #[test]
    fn pooling() {
        let out = pool_frame_tokens(&[vec![vec![3.0, -1.0]]]).unwrap();
        assert_eq!(out, array![[3.0, -1.0]]);
        let out = pool_frame_tokens(&[vec![vec![0.0, 2.0], vec![2.0, 0.0]]]).unwrap();
        assert_eq!(out, array![[1.0, 1.0]]);

        let g = vec![
            vec![0.3, -1.7, 2.2],
            vec![1.1, 0.4, -0.9],
            vec![-2.5, 0.8, 0.05],
        ];
        let out = pool_frame_tokens(std::slice::from_ref(&g)).unwrap();
        for c in 0..3 {
            let mut s = 0.0;
            for v in &g {
                s += v[c];
            }
            assert_abs_diff_eq!(out[[0, c]], s / 3.0, epsilon = 1e-12);
        }

        assert!(pool_frame_tokens(&[vec![vec![1.0]], vec![]]).is_err());
        assert!(pool_frame_tokens(&[vec![vec![1.0]], vec![vec![1.0, 2.0]]]).is_err());
    }

    #[test]
    fn similarity_examples() {
        let tm = TokenMatrix::new(
            array![[0.3, 0.4]],
            array![[0.3, 0.4]],
            array![[1]],
            None,
            1.0,
            2.0,
        )
        .unwrap();
        assert_abs_diff_eq!(similarity_matrix(&tm)[[0, 0]], 1.0, epsilon = 1e-15);

        let tm = TokenMatrix::new(
            array![[1.0, 0.0]],
            array![[0.0, 5.0]],
            array![[0]],
            None,
            1.0,
            2.0,
        )
        .unwrap();
        assert_eq!(similarity_matrix(&tm)[[0, 0]], 0.0);

        let tm = TokenMatrix::new(
            array![[1.0, 0.0]],
            array![[1.0, 1.0]],
            array![[1]],
            None,
            0.07,
            2.0,
        )
        .unwrap();
        assert_abs_diff_eq!(
            similarity_matrix(&tm)[[0, 0]],
            10.101_525_445_522_107,
            epsilon = 1e-12
        );
    }

    #[test]
    fn rejects_bad_token_matrices() {
        let zero = TokenMatrix::new(
            array![[0.0, 0.0]],
            array![[1.0, 0.0]],
            array![[1]],
            None,
            0.07,
            2.0,
        );
        assert!(zero.is_err());
        let dims = TokenMatrix::new(
            array![[1.0]],
            array![[1.0, 0.0]],
            array![[1]],
            None,
            0.07,
            2.0,
        );
        assert!(dims.is_err());
        let label = TokenMatrix::new(array![[1.0]], array![[1.0]], array![[2]], None, 0.07, 2.0);
        assert!(label.is_err());
        let tau = TokenMatrix::new(array![[1.0]], array![[1.0]], array![[1]], None, 0.0, 2.0);
        assert!(tau.is_err());
        let pair = TokenMatrix::new(
            array![[1.0]],
            array![[1.0]],
            array![[1]],
            Some(&[(0, 1)]),
            0.07,
            2.0,
        );
        assert!(pair.is_err());
    }

    #[test]
    fn loss_closed_forms() {
        let (l, tm) = single(0.0, 1);
        assert_abs_diff_eq!(
            find_loss(&l, &tm).unwrap(),
            1.386_294_361_119_890_6,
            epsilon = 1e-12
        );
        let (l, tm) = single(0.0, 0);
        assert_abs_diff_eq!(
            find_loss(&l, &tm).unwrap(),
            std::f64::consts::LN_2,
            epsilon = 1e-12
        );
    }

    #[test]
    fn loss_saturates_to_zero() {
        let tm = TokenMatrix::new(
            array![[1.0]],
            array![[1.0], [2.0]],
            array![[1, 0]],
            None,
            1.0,
            2.0,
        )
        .unwrap();
        let loss = find_loss(&array![[40.0, -40.0]], &tm).unwrap();
        assert!(loss < 1e-10);
    }

    #[test]
    fn loss_is_clamped_under_wrong_saturation() {
        let (l, tm) = single(-800.0, 1);
        let loss = find_loss(&array![[l[[0, 0]]]], &tm).unwrap();
        assert_abs_diff_eq!(loss, -2.0 * LOG_CLAMP.ln(), epsilon = 1e-9);
    }

    #[test]
    fn grad_closed_forms() {
        let (l, tm) = single(0.0, 1);
        assert_eq!(find_loss_grad(&l, &tm).unwrap()[[0, 0]], -1.0);
        let (l, tm) = single(0.0, 0);
        assert_eq!(find_loss_grad(&l, &tm).unwrap()[[0, 0]], 0.5);

        let tm = TokenMatrix::new(
            array![[1.0]],
            array![[1.0], [2.0]],
            array![[1, 0]],
            Some(&[(0, 0)]),
            1.0,
            2.0,
        )
        .unwrap();
        let g = find_loss_grad(&array![[0.3, 0.7]], &tm).unwrap();
        assert_eq!(g[[0, 1]], 0.0);
        assert!(g[[0, 0]] < 0.0);
    }

    #[test]
    fn empty_omega_is_an_error() {
        let tm = TokenMatrix::new(
            array![[1.0]],
            array![[1.0]],
            array![[1]],
            Some(&[]),
            1.0,
            2.0,
        )
        .unwrap();
        assert!(find_loss(&array![[0.0]], &tm).is_err());
        assert!(find_loss_grad(&array![[0.0]], &tm).is_err());
    }

    #[test]
    fn inference_scores_examples() {
        let tm = TokenMatrix::new(
            array![[0.2, 0.9]],
            array![[0.2, 0.9]],
            array![[1]],
            None,
            0.07,
            2.0,
        )
        .unwrap();
        let s = inference_scores(&tm, 0).unwrap();
        assert_abs_diff_eq!(s.values()[0], 1.0 / 0.07, epsilon = 1e-12);

        let tm = TokenMatrix::new(
            array![[1.0, 2.0, -1.0], [0.5, -0.5, 2.0]],
            array![
                [0.3, 1.0, 0.2],
                [-1.0, 0.4, 0.9],
                [2.0, 2.0, 2.0],
                [0.1, -0.3, 0.7]
            ],
            Array2::zeros((2, 4)),
            None,
            0.07,
            2.0,
        )
        .unwrap();
        let full = similarity_matrix(&tm);
        for i in 0..2 {
            let row = inference_scores(&tm, i).unwrap();
            for j in 0..4 {
                assert_eq!(row.values()[j], full[[i, j]]);
                let f = tm.find_tokens.row(i);
                let v = tm.frame_tokens.row(j);
                let (mut dot, mut nf, mut nv) = (0.0, 0.0, 0.0);
                for c in 0..3 {
                    dot += f[c] * v[c];
                    nf += f[c] * f[c];
                    nv += v[c] * v[c];
                }
                assert_abs_diff_eq!(
                    row.values()[j],
                    dot / (nf.sqrt() * nv.sqrt() * 0.07),
                    epsilon = 1e-10
                );
            }
        }
        assert!(inference_scores(&tm, 2).is_err());
    }

    #[test]
    fn token_file_parses() {
        let json = r#"{"find": [[1, 0]], "frames": [[1, 0], [0, 1]], "labels": [[1, 0]], "omega": [[0, 1]]}"#;
        let f: TokenFile = serde_json::from_str(json).unwrap();
        assert_eq!(f.tau, 0.07);
        assert_eq!(f.lambda_p, 2.0);
        let tm = f.into_matrix().unwrap();
        assert_eq!(tm.valid_count(), 1);
        let ragged: TokenFile = serde_json::from_str(
            r#"{"find": [[1, 0]], "frames": [[1], [0, 1]], "labels": [[1, 0]]}"#,
        )
        .unwrap();
        assert!(ragged.into_matrix().is_err());
    }

    fn token_matrix() -> impl Strategy<Value = TokenMatrix> {
        (1usize..=4, 1usize..=16, 1usize..=8).prop_flat_map(|(nf, lt, c)| {
            (
                prop::collection::vec(0.1f64..2.0, nf * c),
                prop::collection::vec(prop::bool::ANY, nf * c),
                prop::collection::vec(0.1f64..2.0, lt * c),
                prop::collection::vec(prop::bool::ANY, lt * c),
                prop::collection::vec(0u8..=1, nf * lt),
            )
                .prop_map(move |(fm, fs, vm, vs, y)| {
                    let signed = |m: Vec<f64>, s: Vec<bool>| {
                        m.into_iter()
                            .zip(s)
                            .map(|(x, neg)| if neg { -x } else { x })
                            .collect::<Vec<_>>()
                    };
                    TokenMatrix::new(
                        Array2::from_shape_vec((nf, c), signed(fm, fs)).unwrap(),
                        Array2::from_shape_vec((lt, c), signed(vm, vs)).unwrap(),
                        Array2::from_shape_vec((nf, lt), y).unwrap(),
                        None,
                        DEFAULT_TEMPERATURE,
                        DEFAULT_POSITIVE_WEIGHT,
                    )
                    .unwrap()
                })
        })
    }

    proptest! {
        #[test]
        fn gradient_matches_finite_differences(tm in token_matrix()) {
            let l = similarity_matrix(&tm);
            let check = grad_check(&l, &tm, DEFAULT_GRAD_STEP).unwrap();
            prop_assert!(check.max_rel_err < 1e-4, "{check:?}");
        }

        #[test]
        fn cosine_is_scale_invariant(tm in token_matrix(), scale in 0.01f64..100.0, row in 0usize..4) {
            let base = similarity_matrix(&tm);
            let mut frames = tm.frame_tokens.clone();
            let r = row % frames.nrows();
            frames.row_mut(r).mapv_inplace(|x| x * scale);
            let scaled = TokenMatrix::new(tm.find_tokens.clone(), frames, tm.labels.clone(), None, tm.temperature, tm.positive_weight).unwrap();
            let other = similarity_matrix(&scaled);
            for (a, b) in base.iter().zip(other.iter()) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }

        #[test]
        fn loss_nonnegative_and_monotone(tm in token_matrix(), bump in 0.0f64..5.0) {
            let l = similarity_matrix(&tm);
            let base = find_loss(&l, &tm).unwrap();
            prop_assert!(base >= 0.0);
            for (idx, &y) in tm.labels.indexed_iter() {
                let mut moved = l.clone();
                moved[idx] += bump;
                let after = find_loss(&moved, &tm).unwrap();
                if y == 1 {
                    prop_assert!(after <= base + 1e-15);
                } else {
                    prop_assert!(after >= base - 1e-15);
                }
            }
        }
    }
}
