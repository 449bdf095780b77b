//! Analysis helpers for comparing a teacher and a student model:
//! confidence transforms, scatter records with correctness grouping,
//! percentile slope fits, KL/entropy deviations, eigenspace weight
//! trajectories, and eigen-truncation accuracy probes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::LabeledSet;
use crate::nn::{forward, Checkpoint, NetworkParams, NetworkSpec, ProbTable};
use crate::numerics::{least_squares_line, sym_eigendecompose, Matrix, NumericsError, SymEigen};

/// Probability clamp used inside the scatter transform: probabilities hit
/// exactly 0 or 1 at float precision, the transform must stay finite.
pub const SCATTER_EPS: f64 = 1e-7;

/// Student probabilities below this are clamped before entering the KL.
pub const KL_CLAMP: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum DiagError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("probability row {index} sums to {sum}, not 1")]
    BadProbability { index: usize, sum: f64 },
    #[error("selected band has too few records for a line fit")]
    DegenerateFit,
    #[error("basis dimension {expected} does not match weight rows {found}")]
    BasisDimMismatch { expected: usize, found: usize },
    #[error("a trace ends at zero on a compared direction")]
    ZeroFinalValue,
    #[error("dataset has no clean labels to split on")]
    MissingCleanLabels,
    #[error("the {0} subset is empty")]
    EmptySubset(&'static str),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Nn(#[from] crate::nn::NnError),
}

/// One example as both models saw it.
#[derive(Debug, Clone)]
pub struct SamplePair {
    pub index: usize,
    pub teacher_probs: Vec<f64>,
    pub student_probs: Vec<f64>,
    pub true_label: usize,
    pub clean_label: Option<usize>,
}

impl SamplePair {
    fn validate(&self) -> Result<(), DiagError> {
        for row in [&self.teacher_probs, &self.student_probs] {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(DiagError::BadProbability { index: self.index, sum: s });
            }
        }
        if self.teacher_probs.len() != self.student_probs.len() {
            return Err(DiagError::ShapeMismatch(format!(
                "pair {} has rows of different lengths",
                self.index
            )));
        }
        Ok(())
    }
}

/// Zips two probability tables with labels into sample pairs.
pub fn pairs_from_tables(
    teacher: &ProbTable,
    student: &ProbTable,
    labels: &[usize],
    clean_labels: Option<&[usize]>,
) -> Result<Vec<SamplePair>, DiagError> {
    if teacher.len() != labels.len() || student.len() != labels.len() {
        return Err(DiagError::ShapeMismatch(format!(
            "tables cover {} and {} examples, labels cover {}",
            teacher.len(),
            student.len(),
            labels.len()
        )));
    }
    if let Some(clean) = clean_labels {
        if clean.len() != labels.len() {
            return Err(DiagError::ShapeMismatch(format!(
                "{} clean labels for {} examples",
                clean.len(),
                labels.len()
            )));
        }
    }
    Ok((0..labels.len())
        .map(|i| SamplePair {
            index: i,
            teacher_probs: teacher.row(i).to_vec(),
            student_probs: student.row(i).to_vec(),
            true_label: labels[i],
            clean_label: clean_labels.map(|c| c[i]),
        })
        .collect())
}

/// The confidence transform: log-odds of a clamped probability.
///
/// Strictly increasing on [eps, 1 - eps]; the clamp keeps float-exact 0s
/// and 1s finite.
pub fn logit_transform(u: f64, eps: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&u), "probability out of range: {u}");
    debug_assert!(eps > 0.0 && eps < 0.5, "clamp out of range: {eps}");
    let c = u.clamp(eps, 1.0 - eps);
    (c / (1.0 - c)).ln()
}

/// Multi-class margin of a logit vector for class `y`:
/// `f_y - log sum_{k != y} exp(f_k)`, computed log-sum-exp stable.
///
/// In exact arithmetic this equals the log-odds of the softmax probability
/// of `y`.
pub fn margin_form(f: &[f64], y: usize) -> Result<f64, DiagError> {
    if f.len() < 2 {
        return Err(DiagError::ShapeMismatch(
            "margin needs at least two classes".to_string(),
        ));
    }
    if y >= f.len() {
        return Err(DiagError::ShapeMismatch(format!(
            "class {y} out of range for {} logits",
            f.len()
        )));
    }
    let m = f
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != y)
        .fold(f64::NEG_INFINITY, |a, (_, &v)| a.max(v));
    let sum: f64 = f
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != y)
        .map(|(_, &v)| (v - m).exp())
        .sum();
    Ok(f[y] - (m + sum.ln()))
}

/// Four-way correctness split of a teacher/student pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Group {
    BothCorrect,
    OnlyStudent,
    OnlyTeacher,
    Neither,
}

impl std::fmt::Display for Group {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Group::BothCorrect => "both_correct",
            Group::OnlyStudent => "only_student",
            Group::OnlyTeacher => "only_teacher",
            Group::Neither => "neither",
        })
    }
}

/// One point of the teacher-vs-student confidence scatter.
#[derive(Debug, Clone)]
pub struct ScatterRecord {
    pub index: usize,
    pub x: f64,
    pub y: f64,
    pub group: Group,
    pub is_noisy: bool,
}

/// Which class the scatter reads confidence on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScatterMode {
    /// The teacher's predicted class (argmax, ties to the lowest index).
    TeacherPredicted,
    /// The observed label.
    TrueClass,
}

fn argmax(row: &[f64]) -> usize {
    let mut bi = 0usize;
    let mut bv = f64::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v > bv {
            bv = v;
            bi = i;
        }
    }
    bi
}

/// Builds scatter records: x is the teacher's transformed confidence on
/// the reference class, y the student's, grouped by which models get the
/// label right; `is_noisy` marks examples whose observed label differs
/// from the clean one.
pub fn build_scatter(
    pairs: &[SamplePair],
    mode: ScatterMode,
) -> Result<Vec<ScatterRecord>, DiagError> {
    let mut out = Vec::with_capacity(pairs.len());
    for pair in pairs {
        pair.validate()?;
        let predicted = argmax(&pair.teacher_probs);
        let class = match mode {
            ScatterMode::TeacherPredicted => predicted,
            ScatterMode::TrueClass => pair.true_label,
        };
        if class >= pair.teacher_probs.len() {
            return Err(DiagError::ShapeMismatch(format!(
                "pair {}: label {class} out of range",
                pair.index
            )));
        }
        let teacher_right = predicted == pair.true_label;
        let student_right = argmax(&pair.student_probs) == pair.true_label;
        let group = match (teacher_right, student_right) {
            (true, true) => Group::BothCorrect,
            (false, true) => Group::OnlyStudent,
            (true, false) => Group::OnlyTeacher,
            (false, false) => Group::Neither,
        };
        out.push(ScatterRecord {
            index: pair.index,
            x: logit_transform(pair.teacher_probs[class], SCATTER_EPS),
            y: logit_transform(pair.student_probs[class], SCATTER_EPS),
            group,
            is_noisy: pair.clean_label.is_some_and(|c| c != pair.true_label),
        });
    }
    Ok(out)
}

/// Percentile band of the scatter, ranked by teacher confidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Band {
    Bottom,
    Top,
}

impl std::fmt::Display for Band {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Band::Bottom => "bottom",
            Band::Top => "top",
        })
    }
}

/// A least-squares line through one confidence band.
#[derive(Debug, Clone, Copy)]
pub struct SlopeFit {
    pub band: Band,
    pub q: f64,
    pub m: f64,
    pub c: f64,
    pub count: usize,
}

/// Fits y = m x + c over the lowest (or highest) `floor(q * N)` records by
/// x, ties broken by index. A slope above 1 is the exaggeration signature.
pub fn slope_by_percentile(
    records: &[ScatterRecord],
    band: Band,
    q: f64,
) -> Result<SlopeFit, DiagError> {
    if !(0.0..=1.0).contains(&q) {
        return Err(DiagError::ShapeMismatch(format!("fraction {q} outside [0, 1]")));
    }
    let count = (q * records.len() as f64).floor() as usize;
    if count < 2 {
        return Err(DiagError::DegenerateFit);
    }
    let mut sorted: Vec<&ScatterRecord> = records.iter().collect();
    sorted.sort_by(|a, b| {
        a.x.partial_cmp(&b.x)
            .expect("scatter x is always finite")
            .then(a.index.cmp(&b.index))
    });
    let slice = match band {
        Band::Bottom => &sorted[..count],
        Band::Top => &sorted[records.len() - count..],
    };
    let xs: Vec<f64> = slice.iter().map(|r| r.x).collect();
    let ys: Vec<f64> = slice.iter().map(|r| r.y).collect();
    let (m, c) = least_squares_line(&xs, &ys).map_err(|e| match e {
        NumericsError::DegenerateFit => DiagError::DegenerateFit,
        other => DiagError::Numerics(other),
    })?;
    Ok(SlopeFit { band, q, m, c, count })
}

/// Per-example divergence of the student's distribution from the
/// teacher's, plus both entropies (all in nats).
#[derive(Debug, Clone, Copy)]
pub struct DeviationRecord {
    pub index: usize,
    pub kl: f64,
    pub teacher_entropy: f64,
    pub student_entropy: f64,
}

fn entropy(p: &[f64]) -> f64 {
    p.iter().map(|&v| if v > 0.0 { -v * v.ln() } else { 0.0 }).sum()
}

/// KL(teacher || student) and entropies per pair. Zero teacher entries
/// contribute nothing; student entries are clamped at `KL_CLAMP`; rounding
/// residue is truncated so the divergence is never negative.
pub fn deviation_metrics(pairs: &[SamplePair]) -> Result<Vec<DeviationRecord>, DiagError> {
    let mut out = Vec::with_capacity(pairs.len());
    for pair in pairs {
        pair.validate()?;
        let mut kl = 0.0;
        for (&t, &s) in pair.teacher_probs.iter().zip(&pair.student_probs) {
            if t > 0.0 {
                kl += t * (t / s.max(KL_CLAMP)).ln();
            }
        }
        out.push(DeviationRecord {
            index: pair.index,
            kl: kl.max(0.0),
            teacher_entropy: entropy(&pair.teacher_probs),
            student_entropy: entropy(&pair.student_probs),
        });
    }
    Ok(out)
}

/// Where an eigenbasis came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BasisProvenance {
    RawInput,
    Patch,
    TeacherHidden,
}

impl std::fmt::Display for BasisProvenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BasisProvenance::RawInput => "raw-input",
            BasisProvenance::Patch => "patch",
            BasisProvenance::TeacherHidden => "teacher-final-hidden",
        })
    }
}

/// An orthonormal set of data directions with their second-moment
/// eigenvalues, descending. Directions are stored one per row.
#[derive(Debug, Clone)]
pub struct EigenBasis {
    directions: Matrix,
    pub eigenvalues: Vec<f64>,
    pub provenance: BasisProvenance,
}

impl EigenBasis {
    /// Dimension of the space the directions live in.
    pub fn dim(&self) -> usize {
        self.directions.cols()
    }

    /// Number of directions.
    pub fn len(&self) -> usize {
        self.directions.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn direction(&self, k: usize) -> &[f64] {
        self.directions.row(k)
    }

    /// Wraps an existing symmetric eigendecomposition.
    pub fn from_sym_eigen(eigen: &SymEigen, provenance: BasisProvenance) -> EigenBasis {
        let mut directions = Matrix::zeros(eigen.dim, eigen.dim);
        for k in 0..eigen.dim {
            let row = directions.row_mut(k);
            for (i, slot) in row.iter_mut().enumerate() {
                *slot = eigen.eigenvectors.get(i, k);
            }
        }
        EigenBasis { directions, eigenvalues: eigen.eigenvalues.clone(), provenance }
    }

    /// Eigendirections of the (optionally centered) second-moment matrix
    /// of `rows`, one example per row.
    ///
    /// When there are fewer examples than dimensions the decomposition
    /// runs on the example-by-example Gram matrix and maps back, keeping
    /// only directions whose eigenvalue clears a relative floor of 1e-12.
    pub fn from_rows(
        rows: &Matrix,
        center: bool,
        provenance: BasisProvenance,
    ) -> Result<EigenBasis, DiagError> {
        let n = rows.rows();
        let p = rows.cols();
        if n == 0 || p == 0 {
            return Err(DiagError::ShapeMismatch("empty data".to_string()));
        }
        let data = if center {
            let mut means = vec![0.0; p];
            for i in 0..n {
                for (m, &v) in means.iter_mut().zip(rows.row(i)) {
                    *m += v;
                }
            }
            for m in &mut means {
                *m /= n as f64;
            }
            let mut centered = rows.clone();
            for i in 0..n {
                for (v, &m) in centered.row_mut(i).iter_mut().zip(&means) {
                    *v -= m;
                }
            }
            centered
        } else {
            rows.clone()
        };
        let inv_n = 1.0 / n as f64;
        if p <= n {
            // second moment directly: S = X^T X / n
            let mut s = Matrix::zeros(p, p);
            for r in 0..n {
                let row = data.row(r);
                for i in 0..p {
                    if row[i] == 0.0 {
                        continue;
                    }
                    let si = s.row_mut(i);
                    for (j, &vj) in row.iter().enumerate() {
                        si[j] += row[i] * vj * inv_n;
                    }
                }
            }
            // enforce bitwise symmetry before decomposing
            for i in 0..p {
                for j in 0..i {
                    let avg = 0.5 * (s.get(i, j) + s.get(j, i));
                    s.set(i, j, avg);
                    s.set(j, i, avg);
                }
            }
            let eigen = sym_eigendecompose(&s, crate::numerics::DEFAULT_EIGEN_TOL)?;
            Ok(EigenBasis::from_sym_eigen(&eigen, provenance))
        } else {
            // Gram trick: X X^T / n shares the nonzero spectrum and its
            // eigenvectors map back through X^T
            let mut g = Matrix::zeros(n, n);
            for i in 0..n {
                for j in 0..=i {
                    let v = crate::numerics::dot(data.row(i), data.row(j)) * inv_n;
                    g.set(i, j, v);
                    g.set(j, i, v);
                }
            }
            // Mapped vectors inherit the leftover off-diagonal mass amplified
            // by the eigenvalue spread, so converge the Gram matrix harder
            // than the default before mapping back.
            let eigen = sym_eigendecompose(&g, 1e-13)?;
            let floor = eigen.eigenvalues.first().copied().unwrap_or(0.0).abs() * 1e-12;
            let mut kept_vals = Vec::new();
            let mut kept_rows: Vec<Vec<f64>> = Vec::new();
            for k in 0..eigen.dim {
                let lambda = eigen.eigenvalues[k];
                if lambda <= floor || lambda <= 0.0 {
                    continue;
                }
                let u: Vec<f64> = (0..n).map(|i| eigen.eigenvectors.get(i, k)).collect();
                let mut v = data.tr_matvec(&u);
                let norm = crate::numerics::norm2(&v);
                if norm == 0.0 {
                    continue;
                }
                for x in &mut v {
                    *x /= norm;
                }
                // Re-orthogonalize against the directions kept so far; the
                // map through the data rows bends near-degenerate pairs
                // slightly toward each other.
                for prev in &kept_rows {
                    let proj = crate::numerics::dot(prev, &v);
                    for (x, &pv) in v.iter_mut().zip(prev.iter()) {
                        *x -= proj * pv;
                    }
                }
                let norm = crate::numerics::norm2(&v);
                if norm == 0.0 {
                    continue;
                }
                for x in &mut v {
                    *x /= norm;
                }
                kept_vals.push(lambda);
                kept_rows.push(v);
            }
            if kept_rows.is_empty() {
                return Err(DiagError::ShapeMismatch(
                    "data has no directions above the rank floor".to_string(),
                ));
            }
            let directions = Matrix::from_rows(&kept_rows)?;
            Ok(EigenBasis { directions, eigenvalues: kept_vals, provenance })
        }
    }
}

/// Weight-space trajectory along chosen eigendirections:
/// `values[d][s]` is the projection norm of direction `directions[d]` at
/// checkpoint step `steps[s]`.
#[derive(Debug, Clone)]
pub struct EigenTrace {
    pub steps: Vec<u64>,
    pub directions: Vec<usize>,
    pub values: Vec<Vec<f64>>,
    pub provenance: BasisProvenance,
}

impl EigenTrace {
    pub fn series(&self, direction_pos: usize) -> &[f64] {
        &self.values[direction_pos]
    }
}

/// Projects one weight layer of each checkpoint onto basis directions.
///
/// `layer` indexes the weight-bearing layers in order; its weight matrix
/// must have one row per basis dimension (convolution kernels are already
/// stored flattened that way). Each value is the Euclidean norm of
/// `W^T v_k`.
pub fn eigentrace(
    checkpoints: &[Checkpoint],
    basis: &EigenBasis,
    layer: usize,
    direction_indices: &[usize],
) -> Result<EigenTrace, DiagError> {
    if checkpoints.is_empty() {
        return Err(DiagError::ShapeMismatch("no checkpoints".to_string()));
    }
    for w in checkpoints.windows(2) {
        if w[1].step <= w[0].step {
            return Err(DiagError::ShapeMismatch(
                "checkpoint steps must strictly increase".to_string(),
            ));
        }
    }
    for &d in direction_indices {
        if d >= basis.len() {
            return Err(DiagError::ShapeMismatch(format!(
                "direction {d} out of range for a basis of {}",
                basis.len()
            )));
        }
    }
    let mut values = vec![Vec::with_capacity(checkpoints.len()); direction_indices.len()];
    for ckpt in checkpoints {
        let lp = ckpt.params.layers.get(layer).ok_or_else(|| {
            DiagError::ShapeMismatch(format!("layer {layer} out of range"))
        })?;
        if lp.weights.rows() != basis.dim() {
            return Err(DiagError::BasisDimMismatch {
                expected: basis.dim(),
                found: lp.weights.rows(),
            });
        }
        for (pos, &d) in direction_indices.iter().enumerate() {
            let proj = lp.weights.tr_matvec(basis.direction(d));
            values[pos].push(crate::numerics::norm2(&proj));
        }
    }
    Ok(EigenTrace {
        steps: checkpoints.iter().map(|c| c.step).collect(),
        directions: direction_indices.to_vec(),
        values,
        provenance: basis.provenance,
    })
}

/// Scalar summary of how much more a student leans on the faster of two
/// directions than its teacher does.
///
/// All four series share one step grid. Each direction is normalized by a
/// common reference, the larger of the two final magnitudes, so identical
/// traces score exactly zero and swapping the models negates the score
/// exactly. (Normalizing each trace by its own final value would cancel
/// any per-direction scale difference and constant-factor dynamics with
/// it, scoring closed-form linear traces as zero.) The score is the mean
/// over steps of how far the student's top-minus-low coverage gap exceeds
/// the teacher's; positive means exaggerated.
pub fn exaggeration_score(
    teacher_top: &[f64],
    teacher_low: &[f64],
    student_top: &[f64],
    student_low: &[f64],
) -> Result<f64, DiagError> {
    let n = teacher_top.len();
    if n == 0
        || teacher_low.len() != n
        || student_top.len() != n
        || student_low.len() != n
    {
        return Err(DiagError::ShapeMismatch(
            "traces must share one nonempty step grid".to_string(),
        ));
    }
    let finals = [
        teacher_top[n - 1],
        student_top[n - 1],
        teacher_low[n - 1],
        student_low[n - 1],
    ];
    if finals.iter().any(|v| *v == 0.0) {
        return Err(DiagError::ZeroFinalValue);
    }
    let top_ref = finals[0].abs().max(finals[1].abs());
    let low_ref = finals[2].abs().max(finals[3].abs());
    let mut sum = 0.0;
    for s in 0..n {
        let student_gap = student_top[s] / top_ref - student_low[s] / low_ref;
        let teacher_gap = teacher_top[s] / top_ref - teacher_low[s] / low_ref;
        sum += student_gap - teacher_gap;
    }
    Ok(sum / n as f64)
}

/// Projects the weights of the first basis-compatible layer onto the top
/// `k_top` directions and reports top-1 accuracy against the observed
/// labels, split into clean and flipped subsets.
///
/// `k_top` of at least the basis size with a complete basis leaves the
/// weights untouched; `k_top = 0` zeroes them, leaving the bias alone.
pub fn truncation_accuracy(
    spec: &NetworkSpec,
    params: &NetworkParams,
    basis: &EigenBasis,
    set: &LabeledSet,
    k_top: usize,
) -> Result<(f64, f64), DiagError> {
    let clean = set
        .clean_labels
        .as_ref()
        .ok_or(DiagError::MissingCleanLabels)?;
    let layer = params
        .layers
        .iter()
        .position(|lp| lp.weights.rows() == basis.dim())
        .ok_or(DiagError::BasisDimMismatch {
            expected: basis.dim(),
            found: params
                .layers
                .first()
                .map_or(0, |lp| lp.weights.rows()),
        })?;

    let k = k_top.min(basis.len());
    let complete = basis.len() == basis.dim();
    let mut truncated = params.clone();
    if !(complete && k == basis.len()) {
        let w = &params.layers[layer].weights;
        let (p, h) = (w.rows(), w.cols());
        let mut new_w = Matrix::zeros(p, h);
        for ki in 0..k {
            let v = basis.direction(ki);
            let coef = w.tr_matvec(v);
            for (i, &vi) in v.iter().enumerate() {
                if vi == 0.0 {
                    continue;
                }
                let row = new_w.row_mut(i);
                for (slot, &cj) in row.iter_mut().zip(&coef) {
                    *slot += vi * cj;
                }
            }
        }
        truncated.layers[layer].weights = new_w;
    }

    let logits = forward(spec, &truncated, &set.inputs)?;
    let mut clean_hit = 0usize;
    let mut clean_n = 0usize;
    let mut noisy_hit = 0usize;
    let mut noisy_n = 0usize;
    for i in 0..set.len() {
        let correct = argmax(logits.row(i)) == set.labels[i];
        if set.labels[i] == clean[i] {
            clean_n += 1;
            clean_hit += usize::from(correct);
        } else {
            noisy_n += 1;
            noisy_hit += usize::from(correct);
        }
    }
    if clean_n == 0 {
        return Err(DiagError::EmptySubset("clean"));
    }
    if noisy_n == 0 {
        return Err(DiagError::EmptySubset("flipped"));
    }
    Ok((clean_hit as f64 / clean_n as f64, noisy_hit as f64 / noisy_n as f64))
}
