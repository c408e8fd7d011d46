//! The shared-weight transformation network, class prototypes, the
//! prototype-alignment contrastive loss and the combined objective.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::RngExt;

use crate::autodiff::{softmax_rows, Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::rng::{derive_seed, seeded};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub input: usize,
    pub hidden: usize,
    pub projection: usize,
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    /// input × hidden
    pub w1: DenseMatrix<T>,
    /// hidden × classes
    pub w2: DenseMatrix<T>,
    /// hidden × projection
    pub w3: DenseMatrix<T>,
}

const INIT_STREAM: u64 = 0x1217;

impl<T: Scalar> ModelParams<T> {
    /// Fan-in uniform initialization `U(−1/√fan_in, 1/√fan_in)`, drawn for
    /// W₁, W₂, W₃ in that order from one seeded stream.
    pub fn init(dims: ModelDims, seed: u64) -> Self {
        let mut rng = seeded(derive_seed(seed, &[INIT_STREAM]));
        let mut draw = |rows: usize, cols: usize| {
            let bound = 1.0 / (rows.max(1) as f64).sqrt();
            DenseMatrix::from_fn(rows, cols, |_, _| T::lit(rng.random_range(-bound..=bound)))
        };
        let w1 = draw(dims.input, dims.hidden);
        let w2 = draw(dims.hidden, dims.classes);
        let w3 = draw(dims.hidden, dims.projection);
        Self { w1, w2, w3 }
    }

    pub fn zeros(dims: ModelDims) -> Self {
        Self {
            w1: DenseMatrix::zeros(dims.input, dims.hidden),
            w2: DenseMatrix::zeros(dims.hidden, dims.classes),
            w3: DenseMatrix::zeros(dims.hidden, dims.projection),
        }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            input: self.w1.rows(),
            hidden: self.w1.cols(),
            projection: self.w3.cols(),
            classes: self.w2.cols(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dims();
        if self.w2.rows() != d.hidden || self.w3.rows() != d.hidden {
            return Err(Error::shape(
                "ModelParams",
                format!("hidden = {}", d.hidden),
                format!("W2 rows {}, W3 rows {}", self.w2.rows(), self.w3.rows()),
            ));
        }
        if !(self.w1.is_finite() && self.w2.is_finite() && self.w3.is_finite()) {
            return Err(Error::NonFinite("model parameters"));
        }
        Ok(())
    }

    /// Order-sensitive FNV-1a hash over the bit patterns of every parameter.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for m in [&self.w1, &self.w2, &self.w3] {
            for x in m.as_slice() {
                for b in x.widen().to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }
}

/// Dropout configuration for one forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dropout {
    pub rate: f64,
    pub training: bool,
    pub seed: u64,
}

impl Dropout {
    pub fn eval() -> Self {
        Self {
            rate: 0.0,
            training: false,
            seed: 0,
        }
    }

    fn active(&self) -> bool {
        self.training && self.rate > 0.0
    }

    /// Inverted-dropout mask: 0 with probability `rate`, else `1/(1−rate)`.
    pub fn mask<T: Scalar>(&self, rows: usize, cols: usize, stream: u64) -> DenseMatrix<T> {
        let mut rng = seeded(derive_seed(self.seed, &[stream]));
        let keep = T::lit(1.0 / (1.0 - self.rate));
        DenseMatrix::from_fn(rows, cols, |_, _| {
            if rng.random::<f64>() < self.rate {
                T::zero()
            } else {
                keep
            }
        })
    }
}

/// Applies dropout outside the tape. Identity in eval mode or at rate 0.
pub fn dropout<T: Scalar>(
    x: &DenseMatrix<T>,
    spec: &Dropout,
    stream: u64,
) -> Result<DenseMatrix<T>> {
    if !(0.0..1.0).contains(&spec.rate) {
        return Err(Error::InvalidParam(format!(
            "dropout rate must lie in [0, 1), got {}",
            spec.rate
        )));
    }
    if !spec.active() {
        return Ok(x.clone());
    }
    x.hadamard(&spec.mask(x.rows(), x.cols(), stream))
}

const DROP_INPUT: u64 = 0;
const DROP_HIDDEN: u64 = 1;

/// `H = relu(dropout(X̄)·W₁)`, `Ŷ = softmax(dropout(H)·W₂)`.
pub fn transform<T: Scalar>(
    x_bar: &DenseMatrix<T>,
    params: &ModelParams<T>,
    drop: &Dropout,
) -> Result<(DenseMatrix<T>, DenseMatrix<T>)> {
    if x_bar.cols() != params.w1.rows() {
        return Err(Error::shape(
            "transform",
            format!("{} input columns", params.w1.rows()),
            format!("{} input columns", x_bar.cols()),
        ));
    }
    let x = dropout(x_bar, drop, DROP_INPUT)?;
    let h = x.matmul(&params.w1)?.map(|v| v.max(T::zero()));
    let hd = dropout(&h, drop, DROP_HIDDEN)?;
    let y = softmax_rows(&hd.matmul(&params.w2)?);
    Ok((h, y))
}

/// Class index per row of the eval-mode output; ties go to the lowest class.
pub fn predict<T: Scalar>(params: &ModelParams<T>, x_bar: &DenseMatrix<T>) -> Result<Vec<usize>> {
    let (_, y) = transform(x_bar, params, &Dropout::eval())?;
    Ok(y.argmax_rows())
}

/// Node-to-class allocation with confidence weights, fixed within a step.
///
/// Row `j` of `weights` holds `s_i / S_j` for each allocated position `i`, so
/// prototypes are `weights · Z`.
#[derive(Clone, Debug, PartialEq)]
pub struct Allocation<T> {
    pub weights: DenseMatrix<T>,
    pub totals: Vec<T>,
    pub valid: Vec<bool>,
}

impl<T: Scalar> Allocation<T> {
    /// Labeled positions go to their true class with weight 1; every other
    /// position goes to its predicted class with weight `max(Ŷ_i)`.
    /// `labeled` holds `(row, class)` pairs relative to `y_hat`.
    pub fn from_predictions(y_hat: &DenseMatrix<T>, labeled: &[(usize, usize)]) -> Result<Self> {
        let (n, c) = y_hat.shape();
        if n == 0 {
            return Err(Error::Empty("prototype scope"));
        }
        let mut class_of = y_hat.argmax_rows();
        let mut weight: Vec<T> = (0..n).map(|i| y_hat[(i, class_of[i])]).collect();
        for &(row, class) in labeled {
            if row >= n || class >= c {
                return Err(Error::shape(
                    "Allocation",
                    format!("labels within {n}x{c}"),
                    format!("({row}, {class})"),
                ));
            }
            class_of[row] = class;
            weight[row] = T::one();
        }
        let mut totals = vec![T::zero(); c];
        for i in 0..n {
            totals[class_of[i]] += weight[i];
        }
        let valid: Vec<bool> = totals.iter().map(|&s| s > T::zero()).collect();
        let mut weights = DenseMatrix::zeros(c, n);
        for i in 0..n {
            let j = class_of[i];
            weights[(j, i)] = weight[i] / totals[j];
        }
        Ok(Self {
            weights,
            totals,
            valid,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet<T> {
    /// classes × projection; rows of invalid classes are zero.
    pub vectors: DenseMatrix<T>,
    pub weights: Vec<T>,
    pub valid: Vec<bool>,
}

/// Confidence-weighted class prototypes over the nodes in `scope`.
///
/// `z` and `y_hat` are indexed by node; `labeled` holds `(node, class)` pairs,
/// each of which must lie in `scope`.
pub fn compute_prototypes<T: Scalar>(
    z: &DenseMatrix<T>,
    y_hat: &DenseMatrix<T>,
    labeled: &[(usize, usize)],
    scope: &[usize],
) -> Result<PrototypeSet<T>> {
    if scope.is_empty() {
        return Err(Error::Empty("prototype scope"));
    }
    if z.rows() != y_hat.rows() {
        return Err(Error::shape(
            "compute_prototypes",
            format!("{} rows", y_hat.rows()),
            format!("{} rows", z.rows()),
        ));
    }
    let position: BTreeMap<usize, usize> = scope.iter().enumerate().map(|(p, &v)| (v, p)).collect();
    let local_labels = labeled
        .iter()
        .map(|&(node, class)| {
            position
                .get(&node)
                .map(|&p| (p, class))
                .ok_or_else(|| Error::InvalidParam(format!("labeled node {node} outside scope")))
        })
        .collect::<Result<Vec<_>>>()?;
    let alloc = Allocation::from_predictions(&y_hat.select_rows(scope), &local_labels)?;
    Ok(PrototypeSet {
        vectors: alloc.weights.matmul(&z.select_rows(scope))?,
        weights: alloc.totals,
        valid: alloc.valid,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContrastOutcome<T> {
    pub loss: T,
    /// Set when fewer than two classes are valid in both sets; the loss is
    /// then zero.
    pub degenerate: bool,
}

/// Contrastive prototype alignment between two prototype sets.
pub fn cpa_loss<T: Scalar>(
    p: &PrototypeSet<T>,
    p_prime: &PrototypeSet<T>,
    tau: T,
    include_positive: bool,
) -> Result<ContrastOutcome<T>> {
    if p.vectors.shape() != p_prime.vectors.shape() {
        return Err(Error::shape(
            "cpa_loss",
            format!("{:?}", p.vectors.shape()),
            format!("{:?}", p_prime.vectors.shape()),
        ));
    }
    let valid: Vec<bool> = p
        .valid
        .iter()
        .zip(&p_prime.valid)
        .map(|(&a, &b)| a && b)
        .collect();
    if valid.iter().filter(|&&v| v).count() < 2 {
        return Ok(ContrastOutcome {
            loss: T::zero(),
            degenerate: true,
        });
    }
    let mut tape = Tape::new();
    let a = tape.constant(p.vectors.clone());
    let b = tape.constant(p_prime.vectors.clone());
    let an = tape.normalize_rows(a);
    let bn = tape.normalize_rows(b);
    let cos = tape.matmul_t(an, bn)?;
    let l = tape.prototype_contrast(cos, valid, tau, include_positive)?;
    Ok(ContrastOutcome {
        loss: tape.scalar(l),
        degenerate: false,
    })
}

/// `L_ce + γ₁·L′_ce + γ₂·L_cpa`.
pub fn total_loss<T: Scalar>(ce: T, ce_global: T, cpa: T, gamma1: T, gamma2: T) -> T {
    ce + gamma1 * ce_global + gamma2 * cpa
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveWeights {
    pub gamma1: f64,
    pub gamma2: f64,
    pub tau: f64,
    pub include_positive: bool,
}

/// Inputs to one objective evaluation. Rows of `x` and `x_global` are the
/// scope nodes in the same order; `labeled` indexes into those rows.
pub struct ObjectiveInputs<'a, T> {
    pub x: &'a DenseMatrix<T>,
    /// `None` builds the single-channel objective (no global channel, no
    /// projection, no prototypes).
    pub x_global: Option<&'a DenseMatrix<T>>,
    pub labeled: &'a [(usize, usize)],
    pub dropout_rate: f64,
    pub dropout_sites: DropoutSites,
    pub training: bool,
    /// Dropout seeds for the original and global channels.
    pub channel_seeds: [u64; 2],
    /// Reuse a fixed allocation instead of deriving one from this pass's
    /// predictions.
    pub allocation: Option<&'a Allocation<T>>,
}

/// A recorded forward pass of the full objective, ready for backward.
pub struct Objective<T> {
    pub tape: Tape<T>,
    pub loss: Var,
    pub params: [Var; 3],
    pub ce: T,
    pub ce_global: Option<T>,
    pub cpa: Option<T>,
    pub cpa_degenerate: bool,
    pub allocation: Option<Allocation<T>>,
}

impl<T: Scalar> Objective<T> {
    pub fn total(&self) -> T {
        self.tape.scalar(self.loss)
    }

    /// Gradients w.r.t. W₁, W₂, W₃ (`None` when a parameter is unused).
    pub fn gradients(&self) -> [Option<DenseMatrix<T>>; 3] {
        let mut g = self.tape.backward(self.loss);
        self.params.map(|v| g.take(v))
    }
}

/// Which linear-layer inputs dropout applies to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DropoutSites {
    pub input: bool,
    pub hidden: bool,
}

impl Default for DropoutSites {
    fn default() -> Self {
        Self {
            input: true,
            hidden: true,
        }
    }
}

struct ChannelOut {
    hidden: Var,
    probs: Var,
}

fn channel_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: &DenseMatrix<T>,
    w1: Var,
    w2: Var,
    inputs: &ObjectiveInputs<'_, T>,
    seed: u64,
) -> Result<ChannelOut> {
    let drop = Dropout {
        rate: inputs.dropout_rate,
        training: inputs.training,
        seed,
    };
    let xv = tape.constant(x.clone());
    let sites = inputs.dropout_sites;
    let xv = if drop.active() && sites.input {
        tape.mul_const(xv, drop.mask(x.rows(), x.cols(), DROP_INPUT))?
    } else {
        xv
    };
    let pre = tape.matmul(xv, w1)?;
    let hidden = tape.relu(pre);
    let hd = if drop.active() && sites.hidden {
        let (r, c) = tape.value(hidden).shape();
        tape.mul_const(hidden, drop.mask(r, c, DROP_HIDDEN))?
    } else {
        hidden
    };
    let logits = tape.matmul(hd, w2)?;
    let probs = tape.softmax_rows(logits);
    Ok(ChannelOut { hidden, probs })
}

/// Records the full objective for one step.
pub fn build_objective<T: Scalar>(
    params: &ModelParams<T>,
    inputs: &ObjectiveInputs<'_, T>,
    weights: &ObjectiveWeights,
) -> Result<Objective<T>> {
    if !(0.0..1.0).contains(&inputs.dropout_rate) {
        return Err(Error::InvalidParam(format!(
            "dropout rate must lie in [0, 1), got {}",
            inputs.dropout_rate
        )));
    }
    let targets = inputs.labeled.to_vec();
    let mut tape = Tape::new();
    let w1 = tape.parameter(params.w1.clone());
    let w2 = tape.parameter(params.w2.clone());
    let w3 = tape.parameter(params.w3.clone());

    let orig = channel_forward(&mut tape, inputs.x, w1, w2, inputs, inputs.channel_seeds[0])?;
    let ce_var = tape.masked_cross_entropy(orig.probs, targets.clone())?;
    let ce = tape.scalar(ce_var);

    let Some(x_global) = inputs.x_global else {
        return Ok(Objective {
            tape,
            loss: ce_var,
            params: [w1, w2, w3],
            ce,
            ce_global: None,
            cpa: None,
            cpa_degenerate: false,
            allocation: None,
        });
    };
    if x_global.shape() != inputs.x.shape() {
        return Err(Error::shape(
            "build_objective",
            format!("global input {:?}", inputs.x.shape()),
            format!("{:?}", x_global.shape()),
        ));
    }
    let glob = channel_forward(&mut tape, x_global, w1, w2, inputs, inputs.channel_seeds[1])?;
    let ce_global_var = tape.masked_cross_entropy(glob.probs, targets)?;
    let ce_global = tape.scalar(ce_global_var);

    let allocation = match inputs.allocation {
        Some(a) => a.clone(),
        None => Allocation::from_predictions(tape.value(orig.probs), inputs.labeled)?,
    };
    let z = tape.matmul(orig.hidden, w3)?;
    let z_global = tape.matmul(glob.hidden, w3)?;
    let agg = tape.constant(allocation.weights.clone());
    let protos = tape.matmul(agg, z)?;
    let protos_global = tape.matmul(agg, z_global)?;
    let pn = tape.normalize_rows(protos);
    let pgn = tape.normalize_rows(protos_global);
    let cos = tape.matmul_t(pn, pgn)?;

    // Zero-weighted terms are reported but kept off the loss path, so their
    // parameters see no gradient (and no weight decay) at all.
    let mut total = ce_var;
    if weights.gamma1 != 0.0 {
        let weighted = tape.scale(ce_global_var, T::lit(weights.gamma1));
        total = tape.add(total, weighted)?;
    }
    let valid_classes = allocation.valid.iter().filter(|&&v| v).count();
    let (cpa, cpa_degenerate) = if valid_classes >= 2 {
        let cpa_var = tape.prototype_contrast(
            cos,
            allocation.valid.clone(),
            T::lit(weights.tau),
            weights.include_positive,
        )?;
        let cpa = tape.scalar(cpa_var);
        if weights.gamma2 != 0.0 {
            let weighted = tape.scale(cpa_var, T::lit(weights.gamma2));
            total = tape.add(total, weighted)?;
        }
        (cpa, false)
    } else {
        (T::zero(), true)
    };
    Ok(Objective {
        tape,
        loss: total,
        params: [w1, w2, w3],
        ce,
        ce_global: Some(ce_global),
        cpa: Some(cpa),
        cpa_degenerate,
        allocation: Some(allocation),
    })
}

/// Metadata stored next to checkpointed parameter matrices.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckpointHeader {
    pub dims: ModelDims,
    pub iterations: usize,
    pub restart_alpha: f64,
}

impl CheckpointHeader {
    fn to_text(self) -> String {
        format!(
            "d = {}\ne = {}\ne_proj = {}\nc = {}\nT = {}\nalpha = {}\n",
            self.dims.input,
            self.dims.hidden,
            self.dims.projection,
            self.dims.classes,
            self.iterations,
            self.restart_alpha
        )
    }

    fn parse(path: &Path, text: &str) -> Result<Self> {
        let map = crate::io::parse_key_values(path, text)?;
        let get = |k: &str| -> Result<&str> {
            map.get(k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Dataset(format!("{}: missing key {k}", path.display())))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Dataset(format!("{}: bad value for {k}", path.display())))
        };
        Ok(Self {
            dims: ModelDims {
                input: num("d")?,
                hidden: num("e")?,
                projection: num("e_proj")?,
                classes: num("c")?,
            },
            iterations: num("T")?,
            restart_alpha: get("alpha")?
                .parse()
                .map_err(|_| Error::Dataset(format!("{}: bad value for alpha", path.display())))?,
        })
    }
}

/// On-disk model: `header.txt` plus `w1.bin`, `w2.bin`, `w3.bin` and, when
/// present, optimizer moments `w{1,2,3}.m.bin` / `w{1,2,3}.v.bin`.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub header: CheckpointHeader,
    pub params: ModelParams<T>,
    pub moments: Option<Vec<crate::optim::Moments<T>>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let header = dir.join("header.txt");
        fs::write(&header, self.header.to_text()).map_err(|e| Error::io(&header, e))?;
        let mats = [&self.params.w1, &self.params.w2, &self.params.w3];
        for (i, m) in mats.iter().enumerate() {
            m.save(dir.join(format!("w{}.bin", i + 1)))?;
        }
        if let Some(moments) = &self.moments {
            for (i, m) in moments.iter().enumerate() {
                m.first.save(dir.join(format!("w{}.m.bin", i + 1)))?;
                m.second.save(dir.join(format!("w{}.v.bin", i + 1)))?;
            }
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let header_path = dir.join("header.txt");
        let text = fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
        let header = CheckpointHeader::parse(&header_path, &text)?;
        let params = ModelParams {
            w1: DenseMatrix::load(dir.join("w1.bin"))?,
            w2: DenseMatrix::load(dir.join("w2.bin"))?,
            w3: DenseMatrix::load(dir.join("w3.bin"))?,
        };
        params.validate()?;
        if params.dims() != header.dims {
            return Err(Error::Dataset(format!(
                "{}: header dims {:?} disagree with matrices {:?}",
                dir.display(),
                header.dims,
                params.dims()
            )));
        }
        let moments = if dir.join("w1.m.bin").exists() {
            let mut ms = Vec::new();
            for i in 1..=3 {
                ms.push(crate::optim::Moments {
                    first: DenseMatrix::load(dir.join(format!("w{i}.m.bin")))?,
                    second: DenseMatrix::load(dir.join(format!("w{i}.v.bin")))?,
                });
            }
            Some(ms)
        } else {
            None
        };
        Ok(Self {
            header,
            params,
            moments,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(d: usize, e: usize, c: usize) -> ModelDims {
        ModelDims {
            input: d,
            hidden: e,
            projection: e,
            classes: c,
        }
    }

    fn set(rows: &[[f64; 2]], valid: &[bool]) -> PrototypeSet<f64> {
        PrototypeSet {
            vectors: DenseMatrix::from_rows(rows),
            weights: vec![1.0; rows.len()],
            valid: valid.to_vec(),
        }
    }

    #[test]
    fn zero_weights_give_uniform_output() {
        let p = ModelParams::<f64>::zeros(dims(3, 4, 5));
        let x = DenseMatrix::from_fn(2, 3, |i, j| (i + j) as f64);
        let (_, y) = transform(&x, &p, &Dropout::eval()).unwrap();
        for &v in y.as_slice() {
            assert!((v - 0.2).abs() < 1e-15);
        }
        assert_eq!(predict(&p, &x).unwrap(), vec![0, 0]);
    }

    #[test]
    fn transform_matches_scalar_recomputation() {
        let p = ModelParams::<f64>::init(dims(3, 2, 2), 11);
        let x = DenseMatrix::from_fn(4, 3, |i, j| ((i * 3 + j) as f64 * 0.7).cos());
        let (h, y) = transform(&x, &p, &Dropout::eval()).unwrap();
        for i in 0..4 {
            let mut hid = [0.0; 2];
            for (k, hk) in hid.iter_mut().enumerate() {
                let s: f64 = (0..3).map(|j| x[(i, j)] * p.w1[(j, k)]).sum();
                *hk = s.max(0.0);
            }
            let logits: Vec<f64> = (0..2)
                .map(|c| (0..2).map(|k| hid[k] * p.w2[(k, c)]).sum())
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for c in 0..2 {
                assert!((y[(i, c)] - logits[c].exp() / z).abs() < 1e-6);
            }
            for k in 0..2 {
                assert!((h[(i, k)] - hid[k]).abs() < 1e-6);
            }
        }
        let again = transform(&x, &p, &Dropout::eval()).unwrap();
        assert_eq!(again.1, y);
    }

    #[test]
    fn dropout_modes() {
        let x = DenseMatrix::from_fn(20, 10, |i, j| (i * 10 + j) as f64 + 1.0);
        let zero = Dropout {
            rate: 0.0,
            training: true,
            seed: 3,
        };
        assert_eq!(dropout(&x, &zero, 0).unwrap(), x);
        let eval = Dropout {
            rate: 0.5,
            training: false,
            seed: 3,
        };
        assert_eq!(dropout(&x, &eval, 0).unwrap(), x);
        let train = Dropout {
            rate: 0.5,
            training: true,
            seed: 3,
        };
        let d = dropout(&x, &train, 0).unwrap();
        let zeros = d.as_slice().iter().filter(|&&v| v == 0.0).count();
        assert!((60..140).contains(&zeros), "{zeros} zeros");
        for (a, b) in d.as_slice().iter().zip(x.as_slice()) {
            assert!(*a == 0.0 || *a == 2.0 * b);
        }
        assert!(dropout(
            &x,
            &Dropout {
                rate: 1.0,
                training: true,
                seed: 0
            },
            0
        )
        .is_err());
    }

    #[test]
    fn prototypes_one_labeled_node_per_class() {
        let z = DenseMatrix::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        let y = DenseMatrix::filled(3, 3, 1.0 / 3.0);
        let p = compute_prototypes(&z, &y, &[(0, 2), (1, 0), (2, 1)], &[0, 1, 2]).unwrap();
        assert_eq!(p.vectors.row(0), z.row(1));
        assert_eq!(p.vectors.row(1), z.row(2));
        assert_eq!(p.vectors.row(2), z.row(0));
        assert_eq!(p.weights, vec![1.0; 3]);
    }

    #[test]
    fn prototypes_confidence_weighted() {
        let z = DenseMatrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        let y = DenseMatrix::from_rows(&[[0.2, 0.8], [0.4, 0.6]]);
        let p = compute_prototypes(&z, &y, &[], &[0, 1]).unwrap();
        assert!(f64::abs(p.vectors[(1, 0)] - 0.8 / 1.4) < 1e-12);
        assert!(f64::abs(p.vectors[(1, 1)] - 0.6 / 1.4) < 1e-12);
        assert!(f64::abs(p.vectors[(1, 0)] - 0.5714) < 1e-4);
        assert_eq!(p.valid, vec![false, true]);
        assert_eq!(p.vectors.row(0), &[0.0, 0.0]);
        assert!(compute_prototypes(&z, &y, &[], &[]).is_err());
        assert!(compute_prototypes(&z, &y, &[(1, 0)], &[0]).is_err());
    }

    #[test]
    fn cpa_examples() {
        let p = set(&[[1.0, 0.0], [0.0, 1.0]], &[true, true]);
        let out = cpa_loss(&p, &p, 1.0, false).unwrap();
        assert!((out.loss + 1.0).abs() < 1e-12);
        assert!(!out.degenerate);

        let q = set(&[[3.0, 0.5], [-1.0, 2.0]], &[true, true]);
        let r = set(&[[1.0, 1.0], [0.5, -2.0]], &[true, true]);
        let base = cpa_loss(&q, &r, 0.3, false).unwrap().loss;
        let scaled = PrototypeSet {
            vectors: q.vectors.scale(7.5),
            ..q.clone()
        };
        assert!((cpa_loss(&scaled, &r, 0.3, false).unwrap().loss - base).abs() < 1e-12);

        let lonely = set(&[[1.0, 0.0], [0.0, 0.0]], &[true, false]);
        let out = cpa_loss(&lonely, &p, 1.0, false).unwrap();
        assert!(out.degenerate);
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn total_loss_arithmetic() {
        assert_eq!(total_loss(1.0, 2.0, -1.0, 1.0, 1.0), 2.0);
        assert_eq!(total_loss(0.7, 5.0, 3.0, 0.0, 0.0), 0.7);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let params = ModelParams::<f32>::init(dims(4, 3, 2), 5);
        let ck = Checkpoint {
            header: CheckpointHeader {
                dims: params.dims(),
                iterations: 10,
                restart_alpha: 0.1,
            },
            params,
            moments: None,
        };
        ck.save(dir.path()).unwrap();
        assert_eq!(Checkpoint::<f32>::load(dir.path()).unwrap(), ck);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = ModelParams::<f64>::init(dims(16, 8, 3), 1);
        assert_eq!(a, ModelParams::init(dims(16, 8, 3), 1));
        assert_ne!(
            a.checksum(),
            ModelParams::<f64>::init(dims(16, 8, 3), 2).checksum()
        );
        assert!(a.w1.max_abs() <= 0.25);
        assert!(a.w2.max_abs() <= 1.0 / 8f64.sqrt());
    }
}
