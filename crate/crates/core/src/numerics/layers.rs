//! Recurrent and projection layers built on the tape.

use rand::Rng;

use super::params::{ParamId, ParameterSet};
use super::tape::{Tape, Var};
use super::tensor::softmax;
use crate::error::{ensure_contract, Result};

/// GRU cell with separate input/recurrent matrices per gate:
///
/// ```text
/// z  = σ(Wz·x + Uz·h + bz)
/// r  = σ(Wr·x + Ur·h + br)
/// h̃  = tanh(Wh·x + Uh·(r ⊙ h) + bh)
/// h' = (1 − z) ⊙ h + z ⊙ h̃
/// ```
#[derive(Clone, Copy, Debug)]
pub struct GruCell {
    pub w_z: ParamId,
    pub u_z: ParamId,
    pub b_z: ParamId,
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub b_r: ParamId,
    pub w_h: ParamId,
    pub u_h: ParamId,
    pub b_h: ParamId,
    pub input: usize,
    pub hidden: usize,
}

const GATES: [&str; 3] = ["z", "r", "h"];

impl GruCell {
    /// Adds the nine cell tensors under `prefix`.
    pub fn register<R: Rng + ?Sized>(
        params: &mut ParameterSet,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<()> {
        for g in GATES {
            params.insert_random(format!("{prefix}.w_{g}"), &[hidden, input], rng)?;
            params.insert_random(format!("{prefix}.u_{g}"), &[hidden, hidden], rng)?;
            params.insert_zeros(format!("{prefix}.b_{g}"), &[hidden])?;
        }
        Ok(())
    }

    /// Looks the cell up by name and validates every tensor's shape.
    pub fn resolve(params: &ParameterSet, prefix: &str) -> Result<Self> {
        let id = |n: &str| params.id(&format!("{prefix}.{n}"));
        let w_z = id("w_z")?;
        let shape = params.value(w_z).shape().to_vec();
        ensure_contract!(shape.len() == 2, "`{prefix}.w_z` must be a matrix");
        let (hidden, input) = (shape[0], shape[1]);
        let cell = Self {
            w_z,
            u_z: id("u_z")?,
            b_z: id("b_z")?,
            w_r: id("w_r")?,
            u_r: id("u_r")?,
            b_r: id("b_r")?,
            w_h: id("w_h")?,
            u_h: id("u_h")?,
            b_h: id("b_h")?,
            input,
            hidden,
        };
        for (pid, want) in [
            (cell.w_r, vec![hidden, input]),
            (cell.w_h, vec![hidden, input]),
            (cell.u_z, vec![hidden, hidden]),
            (cell.u_r, vec![hidden, hidden]),
            (cell.u_h, vec![hidden, hidden]),
            (cell.b_z, vec![hidden]),
            (cell.b_r, vec![hidden]),
            (cell.b_h, vec![hidden]),
        ] {
            ensure_contract!(
                params.value(pid).shape() == want.as_slice(),
                "`{}` has shape {:?}, expected {want:?}",
                params.name(pid),
                params.value(pid).shape()
            );
        }
        Ok(cell)
    }

    pub fn step(&self, tape: &mut Tape<'_>, x: Var, h: Var) -> Result<Var> {
        let z = tape.affine(&[(self.w_z, x), (self.u_z, h)], Some(self.b_z))?;
        let z = tape.sigmoid(z);
        let r = tape.affine(&[(self.w_r, x), (self.u_r, h)], Some(self.b_r))?;
        let r = tape.sigmoid(r);
        let rh = tape.mul(r, h)?;
        let cand = tape.affine(&[(self.w_h, x), (self.u_h, rh)], Some(self.b_h))?;
        let cand = tape.tanh(cand);
        tape.gru_mix(z, h, cand)
    }

    /// Runs the cell over `inputs` from a zero state and returns every state.
    pub fn run(&self, tape: &mut Tape<'_>, inputs: &[Var]) -> Result<Vec<Var>> {
        let mut h = tape.zeros(self.hidden);
        let mut states = Vec::with_capacity(inputs.len());
        for &x in inputs {
            h = self.step(tape, x, h)?;
            states.push(h);
        }
        Ok(states)
    }
}

/// One GRU step outside any larger graph.
pub fn gru_cell_step(params: &ParameterSet, cell: &GruCell, x: &[f64], h: &[f64]) -> Result<Vec<f64>> {
    ensure_contract!(
        x.len() == cell.input,
        "input has {} entries, `{}` expects {}",
        x.len(),
        params.name(cell.w_z),
        cell.input
    );
    ensure_contract!(
        h.len() == cell.hidden,
        "state has {} entries, `{}` expects {}",
        h.len(),
        params.name(cell.u_z),
        cell.hidden
    );
    let mut tape = Tape::new(params);
    let xv = tape.constant(x.to_vec());
    let hv = tape.constant(h.to_vec());
    let out = cell.step(&mut tape, xv, hv)?;
    Ok(tape.value(out).to_vec())
}

/// Bidirectional GRU encoder: final forward state ++ final backward state.
#[derive(Clone, Copy, Debug)]
pub struct BiGru {
    pub fwd: GruCell,
    pub bwd: GruCell,
}

impl BiGru {
    pub fn register<R: Rng + ?Sized>(
        params: &mut ParameterSet,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<()> {
        GruCell::register(params, &format!("{prefix}.fwd"), input, hidden, rng)?;
        GruCell::register(params, &format!("{prefix}.bwd"), input, hidden, rng)
    }

    pub fn resolve(params: &ParameterSet, prefix: &str) -> Result<Self> {
        Ok(Self {
            fwd: GruCell::resolve(params, &format!("{prefix}.fwd"))?,
            bwd: GruCell::resolve(params, &format!("{prefix}.bwd"))?,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.fwd.hidden + self.bwd.hidden
    }

    /// Sequence summary; an empty sequence encodes as the zero vector.
    pub fn encode(&self, tape: &mut Tape<'_>, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Ok(tape.zeros(self.output_dim()));
        }
        let f = self.fwd.run(tape, inputs)?;
        let rev: Vec<Var> = inputs.iter().rev().copied().collect();
        let b = self.bwd.run(tape, &rev)?;
        Ok(tape.concat(&[*f.last().unwrap(), *b.last().unwrap()]))
    }

    /// Per-position states `[fwd_j ++ bwd_j]`.
    pub fn states(&self, tape: &mut Tape<'_>, inputs: &[Var]) -> Result<Vec<Var>> {
        let f = self.fwd.run(tape, inputs)?;
        let rev: Vec<Var> = inputs.iter().rev().copied().collect();
        let mut b = self.bwd.run(tape, &rev)?;
        b.reverse();
        Ok(f.iter().zip(&b).map(|(&fs, &bs)| tape.concat(&[fs, bs])).collect())
    }
}

/// Affine map `W·x + b`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn register<R: Rng + ?Sized>(
        params: &mut ParameterSet,
        prefix: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Result<()> {
        params.insert_random(format!("{prefix}.w"), &[output, input], rng)?;
        params.insert_zeros(format!("{prefix}.b"), &[output])?;
        Ok(())
    }

    pub fn resolve(params: &ParameterSet, prefix: &str) -> Result<Self> {
        Ok(Self {
            w: params.id(&format!("{prefix}.w"))?,
            b: params.id(&format!("{prefix}.b"))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        tape.affine(&[(self.w, x)], Some(self.b))
    }
}

/// Softmax cross-entropy: `(−log p[target], p)` with `p = softmax(logits)`.
pub fn softmax_xent(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    ensure_contract!(!logits.is_empty(), "softmax over an empty vector");
    ensure_contract!(
        target < logits.len(),
        "target id {target} out of range for {} classes",
        logits.len()
    );
    ensure_contract!(logits.iter().all(|l| l.is_finite()), "logits must be finite");
    let probs = softmax(logits);
    Ok((-probs[target].ln(), probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::Tensor;
    use crate::rng::{stream, Component};

    fn zero_cell(input: usize, hidden: usize) -> (ParameterSet, GruCell) {
        let mut p = ParameterSet::new();
        for g in GATES {
            p.insert_zeros(format!("c.w_{g}"), &[hidden, input]).unwrap();
            p.insert_zeros(format!("c.u_{g}"), &[hidden, hidden]).unwrap();
            p.insert_zeros(format!("c.b_{g}"), &[hidden]).unwrap();
        }
        let cell = GruCell::resolve(&p, "c").unwrap();
        (p, cell)
    }

    #[test]
    fn zero_parameters_halve_the_state() {
        let (p, cell) = zero_cell(3, 2);
        let out = gru_cell_step(&p, &cell, &[1.0, -2.0, 0.5], &[0.4, -0.2]).unwrap();
        assert_eq!(out, vec![0.2, -0.1]);
        let out = gru_cell_step(&p, &cell, &[1.0, -2.0, 0.5], &[0.0, 0.0]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_names_the_tensor() {
        let (mut p, _) = zero_cell(3, 2);
        p.assign("c.u_r", Tensor::zeros(&[2, 2])).unwrap();
        let mut bad = ParameterSet::new();
        for (_, name, t) in p.iter() {
            let t = if name == "c.w_h" {
                Tensor::zeros(&[2, 4])
            } else {
                t.clone()
            };
            bad.insert(name, t).unwrap();
        }
        let err = GruCell::resolve(&bad, "c").unwrap_err().to_string();
        assert!(err.contains("c.w_h"), "{err}");

        let cell = GruCell::resolve(&p, "c").unwrap();
        let err = gru_cell_step(&p, &cell, &[1.0, 2.0], &[0.0, 0.0])
            .unwrap_err()
            .to_string();
        assert!(err.contains("c.w_z"), "{err}");
    }

    /// Scalar-by-scalar evaluation of the cell formulas, written independently
    /// of the tape.
    fn gru_reference(p: &ParameterSet, x: &[f64], h: &[f64]) -> Vec<f64> {
        let get = |n: &str| p.get(&format!("c.{n}")).unwrap();
        let hid = h.len();
        let gate = |w: &Tensor, u: &Tensor, b: &Tensor, hin: &[f64], i: usize| {
            let mut s = b.data()[i];
            for j in 0..x.len() {
                s += w.data()[i * x.len() + j] * x[j];
            }
            for (j, hj) in hin.iter().enumerate() {
                s += u.data()[i * hid + j] * hj;
            }
            s
        };
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut z = vec![0.0; hid];
        let mut r = vec![0.0; hid];
        for i in 0..hid {
            z[i] = sig(gate(get("w_z"), get("u_z"), get("b_z"), h, i));
            r[i] = sig(gate(get("w_r"), get("u_r"), get("b_r"), h, i));
        }
        let rh: Vec<f64> = (0..hid).map(|i| r[i] * h[i]).collect();
        (0..hid)
            .map(|i| {
                let c = gate(get("w_h"), get("u_h"), get("b_h"), &rh, i).tanh();
                (1.0 - z[i]) * h[i] + z[i] * c
            })
            .collect()
    }

    #[test]
    fn matches_straight_line_reference() {
        let mut rng = stream(7, Component::Init);
        let (i, h) = (5, 4);
        let mut p = ParameterSet::new();
        for g in GATES {
            p.insert(format!("c.w_{g}"), Tensor::randn(&[h, i], 0.5, &mut rng))
                .unwrap();
            p.insert(format!("c.u_{g}"), Tensor::randn(&[h, h], 0.5, &mut rng))
                .unwrap();
            p.insert(format!("c.b_{g}"), Tensor::randn(&[h], 0.5, &mut rng))
                .unwrap();
        }
        let cell = GruCell::resolve(&p, "c").unwrap();
        let x = Tensor::randn(&[i], 1.0, &mut rng).into_data();
        let s = Tensor::randn(&[h], 1.0, &mut rng).into_data();
        let got = gru_cell_step(&p, &cell, &x, &s).unwrap();
        let want = gru_reference(&p, &x, &s);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
    }

    #[test]
    fn softmax_xent_closed_forms() {
        let (loss, probs) = softmax_xent(&[0.3; 4], 2).unwrap();
        assert!(probs.iter().all(|&p| (p - 0.25).abs() < 1e-15));
        assert!((loss - 4f64.ln()).abs() < 1e-12);

        let (loss, _) = softmax_xent(&[10.0, 0.0], 0).unwrap();
        assert!((loss - (1.0 + (-10f64).exp()).ln()).abs() < 1e-15);
        assert!((loss - 4.53989e-5).abs() < 1e-10);

        assert!(matches!(softmax_xent(&[1.0, 2.0], 2), Err(crate::Error::Contract(_))));
    }

    proptest::proptest! {
        #[test]
        fn softmax_is_shift_invariant_and_normalised(
            logits in proptest::collection::vec(-50.0f64..50.0, 1..64),
            c in -100.0f64..100.0,
        ) {
            let (_, p) = softmax_xent(&logits, 0).unwrap();
            let shifted: Vec<f64> = logits.iter().map(|l| l + c).collect();
            let (_, q) = softmax_xent(&shifted, 0).unwrap();
            let sum: f64 = p.iter().sum();
            proptest::prop_assert!((sum - 1.0).abs() <= 1e-12);
            for (a, b) in p.iter().zip(&q) {
                proptest::prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn softmax_sums_to_one_at_large_dimension() {
        let mut rng = stream(3, Component::Init);
        let logits = Tensor::randn(&[100_000], 20.0, &mut rng).into_data();
        let (_, p) = softmax_xent(&logits, 0).unwrap();
        let sum: f64 = p.iter().sum();
        assert!((sum - 1.0).abs() <= 1e-12, "{sum}");
    }
}
