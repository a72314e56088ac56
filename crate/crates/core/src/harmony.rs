//! Harmony score between classification and regression probabilities, the
//! foreground weighting mask, and the harmony distillation losses.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Bounded, strictly decreasing map from `Δp = |p_r − p_c|` to a score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HsVariant {
    /// `1 − tanh(Δp)`
    #[default]
    Tanh,
    /// `exp(−Δp)`
    Exp,
    /// `1 / ln(e + Δp)`
    Log,
}

impl HsVariant {
    pub const ALL: [HsVariant; 3] = [HsVariant::Tanh, HsVariant::Exp, HsVariant::Log];

    pub fn score(self, delta_p: f64) -> f64 {
        match self {
            HsVariant::Tanh => 1.0 - delta_p.tanh(),
            HsVariant::Exp => (-delta_p).exp(),
            HsVariant::Log => 1.0 / (std::f64::consts::E + delta_p).ln(),
        }
    }

    /// Score at `Δp = 1`, the lower end of the range on `[0, 1]`.
    pub fn floor(self) -> f64 {
        self.score(1.0)
    }

    pub fn name(self) -> &'static str {
        match self {
            HsVariant::Tanh => "tanh",
            HsVariant::Exp => "exp",
            HsVariant::Log => "log",
        }
    }

    fn node(self, g: &mut Graph, delta_p: NodeId) -> NodeId {
        match self {
            HsVariant::Tanh => {
                let one = g.scalar(1.0);
                let t = g.tanh(delta_p);
                g.sub(one, t)
            }
            HsVariant::Exp => {
                let neg = g.scale(delta_p, -1.0);
                g.exp(neg)
            }
            HsVariant::Log => {
                let one = g.scalar(1.0);
                let e = g.scalar(std::f64::consts::E);
                let shifted = g.add(e, delta_p);
                let l = g.ln(shifted);
                g.div(one, l)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossNorm {
    #[default]
    L1,
    L2,
}

impl LossNorm {
    pub fn name(self) -> &'static str {
        match self {
            LossNorm::L1 => "l1",
            LossNorm::L2 => "l2",
        }
    }

    pub fn node(self, g: &mut Graph, diff: NodeId) -> NodeId {
        match self {
            LossNorm::L1 => g.abs(diff),
            LossNorm::L2 => g.square(diff),
        }
    }
}

/// Harmony score graph nodes: returns `(hs, Δp)`.
pub fn harmony_node(g: &mut Graph, p_c: NodeId, p_r: NodeId, variant: HsVariant) -> (NodeId, NodeId) {
    let d = g.sub(p_r, p_c);
    let delta_p = g.abs(d);
    (variant.node(g, delta_p), delta_p)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HarmonyGrid {
    pub level: usize,
    pub variant: HsVariant,
    pub hs: Tensor,
    pub delta_p: Tensor,
}

impl HarmonyGrid {
    /// Rejects probabilities outside `[0, 1]`.
    pub fn compute(level: usize, p_c: &Tensor, p_r: &Tensor, variant: HsVariant) -> Result<Self> {
        check_unit_range("p_c", p_c)?;
        check_unit_range("p_r", p_r)?;
        if p_c.shape() != p_r.shape() {
            return Err(Error::InvalidArgument(format!(
                "p_c {:?} and p_r {:?} differ in shape",
                p_c.shape(),
                p_r.shape()
            )));
        }
        let mut g = Graph::new();
        let c = g.constant(p_c.clone());
        let r = g.constant(p_r.clone());
        let (hs, dp) = harmony_node(&mut g, c, r, variant);
        g.evaluate_all(&Bindings::new())?;
        Ok(Self {
            level,
            variant,
            hs: g.value(hs).expect("evaluated").clone(),
            delta_p: g.value(dp).expect("evaluated").clone(),
        })
    }
}

fn check_unit_range(name: &str, t: &Tensor) -> Result<()> {
    match t.as_slice().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        Some(v) => Err(Error::InvalidArgument(format!("{name} value {v} outside [0, 1]"))),
        None => Ok(()),
    }
}

/// Foreground weights `p_r^t · sqrt(1 + |p_c^t − p_c^s|)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PsiMask {
    pub level: usize,
    pub weights: Tensor,
}

impl PsiMask {
    pub fn compute(level: usize, p_r_t: &Tensor, p_c_t: &Tensor, p_c_s: &Tensor) -> Result<Self> {
        for (name, t) in [("p_r^t", p_r_t), ("p_c^t", p_c_t), ("p_c^s", p_c_s)] {
            check_unit_range(name, t)?;
        }
        let mut g = Graph::new();
        let s = g.constant(p_c_s.clone());
        let psi = psi_node(&mut g, p_r_t, p_c_t, s);
        g.evaluate_all(&Bindings::new())?;
        Ok(Self {
            level,
            weights: g.value(psi).expect("evaluated").clone(),
        })
    }

    pub fn is_all_zero(&self) -> bool {
        self.weights.as_slice().iter().all(|&v| v == 0.0)
    }
}

/// Ψ as a graph node. The student classification probability enters through
/// a detach, so Ψ acts as a per-step constant weight.
pub fn psi_node(g: &mut Graph, p_r_t: &Tensor, p_c_t: &Tensor, p_c_s: NodeId) -> NodeId {
    let rt = g.constant(p_r_t.clone());
    let ct = g.constant(p_c_t.clone());
    let cs = g.detach(p_c_s);
    let d = g.sub(ct, cs);
    let d = g.abs(d);
    let one = g.scalar(1.0);
    let d = g.add(one, d);
    let factor = g.sqrt(d);
    g.mul(rt, factor)
}

/// Uniform harmony distillation: per level, the mean of
/// `norm(HS^t − HS^s)` over cells, summed over levels.
pub fn hd_loss_uniform(g: &mut Graph, levels: &[(NodeId, NodeId)], norm: LossNorm) -> NodeId {
    let terms: Vec<NodeId> = levels
        .iter()
        .map(|&(t, s)| {
            let d = g.sub(t, s);
            let n = norm.node(g, d);
            g.mean(n)
        })
        .collect();
    g.add_all(&terms)
}

/// One level of the Ψ-weighted harmony loss. `psi = None` marks an
/// all-zero mask; such a level contributes nothing.
#[derive(Clone, Copy, Debug)]
pub struct WeightedHdLevel {
    pub teacher: NodeId,
    pub student: NodeId,
    pub psi: Option<NodeId>,
}

/// Ψ-weighted harmony distillation: per level
/// `Σ Ψ·norm(HS^t − HS^s) / Σ Ψ`, summed over levels.
pub fn hd_loss_weighted(g: &mut Graph, levels: &[WeightedHdLevel], norm: LossNorm) -> NodeId {
    let terms: Vec<NodeId> = levels
        .iter()
        .filter_map(|lvl| {
            let psi = lvl.psi?;
            let d = g.sub(lvl.teacher, lvl.student);
            let n = norm.node(g, d);
            let w = g.mul(psi, n);
            let num = g.sum(w);
            let den = g.sum(psi);
            Some(g.div(num, den))
        })
        .collect();
    g.add_all(&terms)
}

fn check_pairs(teacher: &[HarmonyGrid], student: &[HarmonyGrid]) -> Result<()> {
    if teacher.len() != student.len() {
        return Err(Error::InvalidArgument(format!(
            "{} teacher levels vs {} student levels",
            teacher.len(),
            student.len()
        )));
    }
    for (t, s) in teacher.iter().zip(student) {
        if t.variant != s.variant {
            return Err(Error::InvalidArgument(format!(
                "variant mismatch on level {}: {} vs {}",
                t.level,
                t.variant.name(),
                s.variant.name()
            )));
        }
        if t.hs.shape() != s.hs.shape() {
            return Err(Error::InvalidArgument(format!(
                "shape mismatch on level {}: {:?} vs {:?}",
                t.level,
                t.hs.shape(),
                s.hs.shape()
            )));
        }
    }
    Ok(())
}

/// [`hd_loss_uniform`] on evaluated harmony grids.
pub fn hd_uniform_value(teacher: &[HarmonyGrid], student: &[HarmonyGrid], norm: LossNorm) -> Result<f64> {
    check_pairs(teacher, student)?;
    let mut g = Graph::new();
    let pairs: Vec<_> = teacher
        .iter()
        .zip(student)
        .map(|(t, s)| (g.constant(t.hs.clone()), g.constant(s.hs.clone())))
        .collect();
    let out = hd_loss_uniform(&mut g, &pairs, norm);
    g.set_output(out);
    g.evaluate(&Bindings::new())
}

/// [`hd_loss_weighted`] on evaluated harmony grids and masks.
pub fn hd_weighted_value(
    teacher: &[HarmonyGrid],
    student: &[HarmonyGrid],
    psi: &[PsiMask],
    norm: LossNorm,
) -> Result<f64> {
    check_pairs(teacher, student)?;
    if psi.len() != teacher.len() {
        return Err(Error::InvalidArgument("one Ψ mask per level required".into()));
    }
    let mut g = Graph::new();
    let mut levels = Vec::with_capacity(psi.len());
    for ((t, s), p) in teacher.iter().zip(student).zip(psi) {
        if p.weights.shape() != t.hs.shape() {
            return Err(Error::InvalidArgument(format!(
                "Ψ shape {:?} vs harmony shape {:?}",
                p.weights.shape(),
                t.hs.shape()
            )));
        }
        levels.push(WeightedHdLevel {
            teacher: g.constant(t.hs.clone()),
            student: g.constant(s.hs.clone()),
            psi: (!p.is_all_zero()).then(|| g.constant(p.weights.clone())),
        });
    }
    let out = hd_loss_weighted(&mut g, &levels, norm);
    g.set_output(out);
    g.evaluate(&Bindings::new())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(values: &[f64]) -> HarmonyGrid {
        HarmonyGrid {
            level: 0,
            variant: HsVariant::Tanh,
            hs: Tensor::column(values.to_vec()),
            delta_p: Tensor::zeros(values.len(), 1),
        }
    }

    #[test]
    fn variant_maxima_at_zero_gap() {
        for v in HsVariant::ALL {
            assert_eq!(v.score(0.0), 1.0, "{}", v.name());
        }
    }

    #[test]
    fn tanh_values() {
        // 2 / (1 + e^2) and 1 - tanh(0.5), evaluated independently.
        let e2 = std::f64::consts::E.powi(2);
        assert!((HsVariant::Tanh.score(1.0) - 2.0 / (1.0 + e2)).abs() < 1e-15);
        assert!((HsVariant::Tanh.score(1.0) - 0.238406).abs() < 1e-6);
        assert!((HsVariant::Tanh.score(0.5) - 0.537883).abs() < 1e-6);
        assert!((HsVariant::Exp.floor() - (-1.0f64).exp()).abs() < 1e-15);
        assert!((HsVariant::Log.floor() - 1.0 / (std::f64::consts::E + 1.0).ln()).abs() < 1e-15);
    }

    #[test]
    fn strictly_decreasing() {
        for v in HsVariant::ALL {
            let scores: Vec<f64> = (0..100).map(|k| v.score(k as f64 / 99.0)).collect();
            assert!(scores.windows(2).all(|w| w[1] < w[0]), "{}", v.name());
        }
    }

    #[test]
    fn grid_matches_closed_form_and_rejects_out_of_range() {
        let p_c = Tensor::column(vec![0.1, 0.5, 0.9]);
        let p_r = Tensor::column(vec![0.6, 0.5, 0.2]);
        for v in HsVariant::ALL {
            let h = HarmonyGrid::compute(0, &p_c, &p_r, v).unwrap();
            for k in 0..3 {
                let dp = (p_r.get(k, 0) - p_c.get(k, 0)).abs();
                assert!((h.delta_p.get(k, 0) - dp).abs() < 1e-15);
                assert!((h.hs.get(k, 0) - v.score(dp)).abs() < 1e-15);
            }
        }
        let bad = Tensor::column(vec![1.2, 0.0, 0.0]);
        assert!(HarmonyGrid::compute(0, &bad, &p_r, HsVariant::Tanh).is_err());
    }

    #[test]
    fn uniform_loss_examples() {
        let t = grid(&[0.9]);
        let s = grid(&[0.6]);
        assert_eq!(hd_uniform_value(&[t.clone()], &[t.clone()], LossNorm::L1).unwrap(), 0.0);
        assert!((hd_uniform_value(&[t.clone()], &[s.clone()], LossNorm::L1).unwrap() - 0.3).abs() < 1e-12);
        assert!((hd_uniform_value(&[t], &[s], LossNorm::L2).unwrap() - 0.09).abs() < 1e-12);
    }

    #[test]
    fn mismatched_grids_rejected() {
        let mut s = grid(&[0.5]);
        s.variant = HsVariant::Exp;
        assert!(hd_uniform_value(&[grid(&[0.5])], &[s], LossNorm::L1).is_err());
        assert!(hd_uniform_value(&[grid(&[0.5])], &[grid(&[0.5, 0.1])], LossNorm::L1).is_err());
    }

    #[test]
    fn psi_examples() {
        let one = Tensor::column(vec![1.0]);
        let zero = Tensor::column(vec![0.0]);
        let p = PsiMask::compute(0, &zero, &one, &zero).unwrap();
        assert_eq!(p.weights.item(), 0.0);
        let p = PsiMask::compute(0, &one, &Tensor::column(vec![0.4]), &Tensor::column(vec![0.4])).unwrap();
        assert_eq!(p.weights.item(), 1.0);
        let p = PsiMask::compute(0, &one, &one, &zero).unwrap();
        assert!((p.weights.item() - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn weighted_loss_examples() {
        // Ψ = (1, 0), |HS^t - HS^s| = (0.2, 0.9): (1·0.2 + 0·0.9) / 1.
        let t = grid(&[0.9, 0.95]);
        let s = grid(&[0.7, 0.05]);
        let psi = PsiMask {
            level: 0,
            weights: Tensor::column(vec![1.0, 0.0]),
        };
        let v = hd_weighted_value(&[t.clone()], &[s.clone()], &[psi], LossNorm::L1).unwrap();
        assert!((v - 0.2).abs() < 1e-12);

        let uniform = PsiMask {
            level: 0,
            weights: Tensor::column(vec![0.37, 0.37]),
        };
        let w = hd_weighted_value(&[t.clone()], &[s.clone()], &[uniform], LossNorm::L2).unwrap();
        let u = hd_uniform_value(&[t.clone()], &[s], LossNorm::L2).unwrap();
        assert!((w - u).abs() < 1e-12);

        let zero = PsiMask {
            level: 0,
            weights: Tensor::zeros(2, 1),
        };
        assert_eq!(hd_weighted_value(&[t.clone()], &[grid(&[0.0, 0.0])], &[zero], LossNorm::L1).unwrap(), 0.0);
    }
}
