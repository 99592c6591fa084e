//! Parameter sets, low-rank task vectors, and weighted merging.
//!
//! A [`ParamSet`] is an ordered list of named dense matrices. A [`TaskVector`]
//! is a per-source update stored as per-layer factor pairs (B: m x r,
//! A: r x n); the dense delta B.A is only materialized where an operation
//! needs it. Merging accumulates lambda_j * (B_j A_j) layer by layer, so
//! layers a source never touched contribute exactly zero without any
//! zero-padding. The data-free baselines (averaging, uniform scaling, and
//! trim/elect/disjoint-mean) are thin layers over the same merge primitive.
//!
//! All types are immutable values after construction and every operation is a
//! pure function, so everything here is safe to share across threads.

use ndarray::linalg::general_mat_mul;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default uniform coefficient for the task-arithmetic baseline.
pub const DEFAULT_TASK_ARITHMETIC_SCALE: f64 = 0.4;
/// Default scale applied after trim/elect/disjoint-mean.
pub const DEFAULT_TIES_SCALE: f64 = 1.0;
/// Default trim density: keep every coordinate.
pub const DEFAULT_TIES_DENSITY: f64 = 1.0;

#[derive(Debug, Error)]
pub enum ParamAlgebraError {
    #[error("duplicate layer name {0:?}")]
    DuplicateLayer(String),
    #[error("layer {name:?}: B is {m}x{rb} but A is {ra}x{n}; inner dims must agree and lie in 1..={rank}")]
    FactorShape {
        name: String,
        m: usize,
        rb: usize,
        ra: usize,
        n: usize,
        rank: usize,
    },
    #[error("layer {name:?}: rank {rank} exceeds min({m}, {n})")]
    RankTooLarge {
        name: String,
        rank: usize,
        m: usize,
        n: usize,
    },
    #[error("task-vector rank must be at least 1")]
    InvalidRank,
    #[error("layer {name:?}: update shape {got:?} does not match baseline shape {want:?}")]
    LayerShape {
        name: String,
        got: [usize; 2],
        want: [usize; 2],
    },
    #[error("layer {0:?} is not in the baseline fingerprint")]
    UnknownLayer(String),
    #[error("fingerprint mismatch: {0}")]
    FingerprintMismatch(String),
    #[error("got {got} coefficients for {want} task vectors")]
    CoefficientCount { got: usize, want: usize },
    #[error("need at least one task vector")]
    EmptyMerge,
    #[error("coefficient {index} = {value} is outside bounds [{lo}, {hi}]")]
    CoefficientOutOfBounds {
        index: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("bounds ({0}, {1}) are not a valid interval")]
    InvalidBounds(f64, f64),
    #[error("trim density must lie in (0, 1], got {0}")]
    BadDensity(f64),
    #[error("matrix shape [{m}, {n}] does not match data length {len}")]
    DataLength { m: usize, n: usize, len: usize },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Name and shape of one layer; the unit of structural compatibility.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSig {
    pub name: String,
    pub shape: [usize; 2],
}

/// Ordered layer signatures. Equality is exact on names and shapes; there is
/// deliberately no structural coercion or broadcasting.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Fingerprint(Vec<LayerSig>);

impl Fingerprint {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &LayerSig> {
        self.0.iter()
    }

    /// Shape of the named layer, if present.
    pub fn shape_of(&self, name: &str) -> Option<[usize; 2]> {
        self.0.iter().find(|s| s.name == name).map(|s| s.shape)
    }

    /// Total number of scalar parameters across all layers.
    pub fn param_count(&self) -> usize {
        self.0.iter().map(|s| s.shape[0] * s.shape[1]).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
struct NamedMatrix {
    name: String,
    data: Array2<f64>,
}

/// An ordered list of named dense matrices, e.g. a full model or a dense
/// delta. Layer names are unique; ordering is the construction order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "ParamSetWire", try_from = "ParamSetWire")]
pub struct ParamSet {
    layers: Vec<NamedMatrix>,
}

impl ParamSet {
    pub fn new(layers: Vec<(String, Array2<f64>)>) -> Result<Self, ParamAlgebraError> {
        for (i, (name, _)) in layers.iter().enumerate() {
            if layers[..i].iter().any(|(n, _)| n == name) {
                return Err(ParamAlgebraError::DuplicateLayer(name.clone()));
            }
        }
        Ok(ParamSet {
            layers: layers
                .into_iter()
                .map(|(name, data)| NamedMatrix { name, data })
                .collect(),
        })
    }

    pub fn fingerprint(&self) -> Fingerprint {
        Fingerprint(
            self.layers
                .iter()
                .map(|l| LayerSig {
                    name: l.name.clone(),
                    shape: [l.data.nrows(), l.data.ncols()],
                })
                .collect(),
        )
    }

    pub fn layer(&self, name: &str) -> Option<&Array2<f64>> {
        self.layers.iter().find(|l| l.name == name).map(|l| &l.data)
    }

    fn layer_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.layers
            .iter_mut()
            .find(|l| l.name == name)
            .map(|l| &mut l.data)
    }

    pub fn layers(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.layers.iter().map(|l| (l.name.as_str(), &l.data))
    }

    pub fn to_json(&self) -> Result<String, ParamAlgebraError> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, ParamAlgebraError> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Update {
    name: String,
    b: Array2<f64>,
    a: Array2<f64>,
}

/// A per-source parameter update in factored form. Each entry holds the pair
/// (B, A) with B: m x r_e and A: r_e x n, where [m, n] is the shape of the
/// named layer in `baseline_fingerprint`. `rank` caps the per-entry inner
/// dims: 1 <= r_e <= rank (a bias column stores its dense delta as an r_e = 1
/// factor next to rank-r weight factors). Layers absent from `updates`
/// contribute exactly zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "TaskVectorWire", try_from = "TaskVectorWire")]
pub struct TaskVector {
    baseline_fingerprint: Fingerprint,
    rank: usize,
    updates: Vec<Update>,
}

impl TaskVector {
    pub fn new(
        baseline_fingerprint: Fingerprint,
        rank: usize,
        updates: Vec<(String, Array2<f64>, Array2<f64>)>,
    ) -> Result<Self, ParamAlgebraError> {
        if rank == 0 {
            return Err(ParamAlgebraError::InvalidRank);
        }
        for (i, (name, _, _)) in updates.iter().enumerate() {
            if updates[..i].iter().any(|(n, _, _)| n == name) {
                return Err(ParamAlgebraError::DuplicateLayer(name.clone()));
            }
        }
        for (name, b, a) in &updates {
            let want = baseline_fingerprint
                .shape_of(name)
                .ok_or_else(|| ParamAlgebraError::UnknownLayer(name.clone()))?;
            let r_e = b.ncols();
            if a.nrows() != r_e || r_e == 0 || r_e > rank {
                return Err(ParamAlgebraError::FactorShape {
                    name: name.clone(),
                    m: b.nrows(),
                    rb: b.ncols(),
                    ra: a.nrows(),
                    n: a.ncols(),
                    rank,
                });
            }
            let got = [b.nrows(), a.ncols()];
            if got != want {
                return Err(ParamAlgebraError::LayerShape {
                    name: name.clone(),
                    got,
                    want,
                });
            }
            if r_e > want[0].min(want[1]) {
                return Err(ParamAlgebraError::RankTooLarge {
                    name: name.clone(),
                    rank: r_e,
                    m: want[0],
                    n: want[1],
                });
            }
        }
        Ok(TaskVector {
            baseline_fingerprint,
            rank,
            updates: updates
                .into_iter()
                .map(|(name, b, a)| Update { name, b, a })
                .collect(),
        })
    }

    pub fn baseline_fingerprint(&self) -> &Fingerprint {
        &self.baseline_fingerprint
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Factor pair for the named layer, if this source updates it.
    pub fn update(&self, name: &str) -> Option<(&Array2<f64>, &Array2<f64>)> {
        self.updates
            .iter()
            .find(|u| u.name == name)
            .map(|u| (&u.b, &u.a))
    }

    pub fn updated_layers(&self) -> impl Iterator<Item = &str> {
        self.updates.iter().map(|u| u.name.as_str())
    }

    pub fn to_json(&self) -> Result<String, ParamAlgebraError> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, ParamAlgebraError> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Mixing coefficients lambda over M sources, each constrained to `bounds`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MergeSpecWire", into = "MergeSpecWire")]
pub struct MergeSpec {
    coefficients: Vec<f64>,
    bounds: (f64, f64),
}

impl MergeSpec {
    pub const DEFAULT_BOUNDS: (f64, f64) = (0.0, 1.0);

    /// Coefficients under the default [0, 1] bounds.
    pub fn new(coefficients: Vec<f64>) -> Result<Self, ParamAlgebraError> {
        Self::with_bounds(coefficients, Self::DEFAULT_BOUNDS)
    }

    pub fn with_bounds(
        coefficients: Vec<f64>,
        bounds: (f64, f64),
    ) -> Result<Self, ParamAlgebraError> {
        let (lo, hi) = bounds;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(ParamAlgebraError::InvalidBounds(lo, hi));
        }
        for (index, &value) in coefficients.iter().enumerate() {
            if !value.is_finite() || value < lo || value > hi {
                return Err(ParamAlgebraError::CoefficientOutOfBounds {
                    index,
                    value,
                    lo,
                    hi,
                });
            }
        }
        Ok(MergeSpec {
            coefficients,
            bounds,
        })
    }

    /// lambda_j = 1/M for all j.
    pub fn uniform(m: usize) -> Result<Self, ParamAlgebraError> {
        if m == 0 {
            return Err(ParamAlgebraError::EmptyMerge);
        }
        Self::new(vec![1.0 / m as f64; m])
    }

    /// lambda_j = value for all j, with bounds widened to contain the value.
    pub fn constant(m: usize, value: f64) -> Result<Self, ParamAlgebraError> {
        if m == 0 {
            return Err(ParamAlgebraError::EmptyMerge);
        }
        let lo = 0.0_f64.min(value);
        let hi = 1.0_f64.max(value);
        Self::with_bounds(vec![value; m], (lo, hi))
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn bounds(&self) -> (f64, f64) {
        self.bounds
    }

    pub fn len(&self) -> usize {
        self.coefficients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coefficients.is_empty()
    }
}

/// Dense per-layer delta B.A for every baseline layer; layers the source does
/// not update come back as zero matrices.
pub fn materialize_dense(tv: &TaskVector) -> ParamSet {
    let layers = tv
        .baseline_fingerprint
        .iter()
        .map(|sig| {
            let dense = match tv.update(&sig.name) {
                Some((b, a)) => b.dot(a),
                None => Array2::zeros((sig.shape[0], sig.shape[1])),
            };
            (sig.name.clone(), dense)
        })
        .collect();
    ParamSet::new(layers).expect("fingerprint names are unique by construction")
}

fn check_merge_inputs(
    base: &ParamSet,
    tvs: &[TaskVector],
    n_coeffs: usize,
) -> Result<(), ParamAlgebraError> {
    if tvs.is_empty() {
        return Err(ParamAlgebraError::EmptyMerge);
    }
    if tvs.len() != n_coeffs {
        return Err(ParamAlgebraError::CoefficientCount {
            got: n_coeffs,
            want: tvs.len(),
        });
    }
    let fp = base.fingerprint();
    for (j, tv) in tvs.iter().enumerate() {
        if tv.baseline_fingerprint != fp {
            return Err(ParamAlgebraError::FingerprintMismatch(format!(
                "task vector {j} was built against a different baseline"
            )));
        }
    }
    Ok(())
}

/// theta_merged = base + sum_j lambda_j (B_j A_j), accumulated per layer.
pub fn merge(
    base: &ParamSet,
    tvs: &[TaskVector],
    spec: &MergeSpec,
) -> Result<ParamSet, ParamAlgebraError> {
    check_merge_inputs(base, tvs, spec.len())?;
    let mut out = base.clone();
    for (tv, &lam) in tvs.iter().zip(spec.coefficients()) {
        if lam == 0.0 {
            continue;
        }
        for upd in &tv.updates {
            let dst = out
                .layer_mut(&upd.name)
                .expect("fingerprints verified above");
            general_mat_mul(lam, &upd.b, &upd.a, 1.0, dst);
        }
    }
    Ok(out)
}

/// Parameter averaging over a shared base: merge with lambda_j = 1/M.
pub fn merge_average(base: &ParamSet, tvs: &[TaskVector]) -> Result<ParamSet, ParamAlgebraError> {
    if tvs.is_empty() {
        return Err(ParamAlgebraError::EmptyMerge);
    }
    merge(base, tvs, &MergeSpec::uniform(tvs.len())?)
}

/// Task arithmetic: merge with the same scale for every source.
pub fn merge_task_arithmetic(
    base: &ParamSet,
    tvs: &[TaskVector],
    scale: f64,
) -> Result<ParamSet, ParamAlgebraError> {
    if tvs.is_empty() {
        return Err(ParamAlgebraError::EmptyMerge);
    }
    merge(base, tvs, &MergeSpec::constant(tvs.len(), scale)?)
}

/// Trim, elect sign, disjoint mean.
///
/// Each task vector is densified against the baseline fingerprint and
/// flattened (fingerprint order, row-major within a layer). Per source, all
/// but the top `density` fraction of coordinates by absolute magnitude are
/// zeroed (ties break toward the lower flat index). Per coordinate, the sign
/// with the larger total trimmed magnitude wins; entries agreeing with it are
/// averaged, everything else is dropped. Equal positive and negative totals
/// elect no sign and the coordinate stays zero. The result times `scale` is
/// added to base.
pub fn merge_ties(
    base: &ParamSet,
    tvs: &[TaskVector],
    density: f64,
    scale: f64,
) -> Result<ParamSet, ParamAlgebraError> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(ParamAlgebraError::BadDensity(density));
    }
    check_merge_inputs(base, tvs, tvs.len())?;
    let fp = base.fingerprint();
    let total = fp.param_count();
    let keep = ((density * total as f64).ceil() as usize).min(total);

    let mut flats: Vec<Vec<f64>> = tvs.iter().map(|tv| flatten_dense(tv, &fp)).collect();
    for flat in &mut flats {
        trim_to_top(flat, keep);
    }

    let mut merged = vec![0.0; total];
    for (c, slot) in merged.iter_mut().enumerate() {
        let mut pos = 0.0;
        let mut neg = 0.0;
        for flat in &flats {
            let v = flat[c];
            if v > 0.0 {
                pos += v;
            } else if v < 0.0 {
                neg -= v;
            }
        }
        let elected = if pos > neg {
            1.0
        } else if neg > pos {
            -1.0
        } else {
            continue;
        };
        let mut sum = 0.0;
        let mut n = 0usize;
        for flat in &flats {
            let v = flat[c];
            if v != 0.0 && v.signum() == elected {
                sum += v;
                n += 1;
            }
        }
        if n > 0 {
            *slot = scale * sum / n as f64;
        }
    }

    let mut out = base.clone();
    let mut offset = 0;
    for sig in fp.iter() {
        let count = sig.shape[0] * sig.shape[1];
        let dst = out.layer_mut(&sig.name).expect("fingerprint layer exists");
        for (slot, &v) in dst.iter_mut().zip(&merged[offset..offset + count]) {
            *slot += v;
        }
        offset += count;
    }
    Ok(out)
}

/// Dense flatten in fingerprint order; absent layers contribute zeros.
fn flatten_dense(tv: &TaskVector, fp: &Fingerprint) -> Vec<f64> {
    let mut flat = Vec::with_capacity(fp.param_count());
    for sig in fp.iter() {
        match tv.update(&sig.name) {
            Some((b, a)) => flat.extend(b.dot(a).iter()),
            None => flat.extend(std::iter::repeat_n(0.0, sig.shape[0] * sig.shape[1])),
        }
    }
    flat
}

/// Keep the `keep` largest-magnitude entries, zero the rest. Magnitude ties
/// resolve toward the lower index so the selection is deterministic.
fn trim_to_top(values: &mut [f64], keep: usize) {
    if keep >= values.len() {
        return;
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| {
        values[j]
            .abs()
            .total_cmp(&values[i].abs())
            .then(i.cmp(&j))
    });
    for &i in &order[keep..] {
        values[i] = 0.0;
    }
}

// Wire representations. ParamSet documents serialize as
//   {"fingerprint": [{"name", "shape"}...], "layers": [{"name", "shape", "data"}...]}
// and TaskVector documents as
//   {"fingerprint": [...], "rank": r, "updates": [{"name", "shape", "b": {"shape", "data"}, "a": {...}}...]}
// with row-major data arrays. serde_json emits shortest round-trip decimals,
// so a parse of the emitted text reproduces every f64 bit-exactly.

#[derive(Serialize, Deserialize)]
struct MatrixWire {
    shape: [usize; 2],
    data: Vec<f64>,
}

impl MatrixWire {
    fn from_array(a: &Array2<f64>) -> Self {
        MatrixWire {
            shape: [a.nrows(), a.ncols()],
            data: a.iter().copied().collect(),
        }
    }

    fn into_array(self) -> Result<Array2<f64>, ParamAlgebraError> {
        let [m, n] = self.shape;
        if self.data.len() != m * n {
            return Err(ParamAlgebraError::DataLength {
                m,
                n,
                len: self.data.len(),
            });
        }
        Ok(Array2::from_shape_vec((m, n), self.data).expect("length checked"))
    }
}

#[derive(Serialize, Deserialize)]
struct ParamLayerWire {
    name: String,
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ParamSetWire {
    fingerprint: Vec<LayerSig>,
    layers: Vec<ParamLayerWire>,
}

impl From<ParamSet> for ParamSetWire {
    fn from(ps: ParamSet) -> Self {
        let fingerprint = ps.fingerprint().0;
        ParamSetWire {
            fingerprint,
            layers: ps
                .layers
                .into_iter()
                .map(|l| ParamLayerWire {
                    name: l.name,
                    shape: [l.data.nrows(), l.data.ncols()],
                    data: l.data.iter().copied().collect(),
                })
                .collect(),
        }
    }
}

impl TryFrom<ParamSetWire> for ParamSet {
    type Error = ParamAlgebraError;

    fn try_from(wire: ParamSetWire) -> Result<Self, Self::Error> {
        let mut layers = Vec::with_capacity(wire.layers.len());
        for l in wire.layers {
            let array = MatrixWire {
                shape: l.shape,
                data: l.data,
            }
            .into_array()?;
            layers.push((l.name, array));
        }
        let ps = ParamSet::new(layers)?;
        let declared = Fingerprint(wire.fingerprint);
        if ps.fingerprint() != declared {
            return Err(ParamAlgebraError::FingerprintMismatch(
                "declared fingerprint does not match layer data".into(),
            ));
        }
        Ok(ps)
    }
}

#[derive(Serialize, Deserialize)]
struct UpdateWire {
    name: String,
    /// Dense shape of B.A, i.e. the shape of the named baseline layer.
    shape: [usize; 2],
    b: MatrixWire,
    a: MatrixWire,
}

#[derive(Serialize, Deserialize)]
struct TaskVectorWire {
    fingerprint: Vec<LayerSig>,
    rank: usize,
    updates: Vec<UpdateWire>,
}

impl From<TaskVector> for TaskVectorWire {
    fn from(tv: TaskVector) -> Self {
        TaskVectorWire {
            fingerprint: tv.baseline_fingerprint.0,
            rank: tv.rank,
            updates: tv
                .updates
                .into_iter()
                .map(|u| UpdateWire {
                    name: u.name,
                    shape: [u.b.nrows(), u.a.ncols()],
                    b: MatrixWire::from_array(&u.b),
                    a: MatrixWire::from_array(&u.a),
                })
                .collect(),
        }
    }
}

impl TryFrom<TaskVectorWire> for TaskVector {
    type Error = ParamAlgebraError;

    fn try_from(wire: TaskVectorWire) -> Result<Self, Self::Error> {
        let mut updates = Vec::with_capacity(wire.updates.len());
        for u in wire.updates {
            let b = u.b.into_array()?;
            let a = u.a.into_array()?;
            let got = [b.nrows(), a.ncols()];
            if got != u.shape {
                return Err(ParamAlgebraError::LayerShape {
                    name: u.name,
                    got: u.shape,
                    want: got,
                });
            }
            updates.push((u.name, b, a));
        }
        TaskVector::new(Fingerprint(wire.fingerprint), wire.rank, updates)
    }
}

#[derive(Serialize, Deserialize)]
struct MergeSpecWire {
    coefficients: Vec<f64>,
    bounds: (f64, f64),
}

impl From<MergeSpec> for MergeSpecWire {
    fn from(s: MergeSpec) -> Self {
        MergeSpecWire {
            coefficients: s.coefficients,
            bounds: s.bounds,
        }
    }
}

impl TryFrom<MergeSpecWire> for MergeSpec {
    type Error = ParamAlgebraError;

    fn try_from(wire: MergeSpecWire) -> Result<Self, Self::Error> {
        MergeSpec::with_bounds(wire.coefficients, wire.bounds)
    }
}
