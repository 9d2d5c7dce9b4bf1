//! Per-point residuals of the three flow-map validity conditions
//! (Lagrangian, Eulerian, semigroup), combined over the X and Z components.
//! Useful as a training diagnostic: valid maps drive all three to zero.

use crate::autodiff::Tensor;
use crate::model::{divergence, JointFlowMap, TraceMode, VelocityField};

#[derive(Debug, Clone)]
pub struct ResidualNorms {
    pub lagrangian: Vec<f64>,
    pub eulerian: Vec<f64>,
    pub semigroup: Vec<f64>,
}

impl ResidualNorms {
    pub fn medians(&self) -> (f64, f64, f64) {
        (
            median(&self.lagrangian),
            median(&self.eulerian),
            median(&self.semigroup),
        )
    }
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Evaluate all three condition residuals of the joint map at (x, t, s),
/// using `v_ref` as the instantaneous velocity (a teacher, or the map's own
/// diagonal). Time derivatives are taken by forward-mode JVP; the semigroup
/// condition uses the midpoint r = (t+s)/2.
pub fn flowmap_residuals(
    map: &dyn JointFlowMap,
    v_ref: &dyn VelocityField,
    x: &Tensor,
    t: &Tensor,
    s: &Tensor,
) -> ResidualNorms {
    let (n, d) = x.dims2();
    let gap_col = s.sub(t);
    let gap = gap_col.data();

    // ── Eulerian: ∂_t Φ + ∇Φ·v = 0, per component ────────────────────
    // X row: v - u + (s-t)·(∂_t u + ∇u·v)
    // Z row: -D + (s-t)·(∂_t D + ∇D·v) - div(v)
    let (v, div_v) = divergence(v_ref, x, t, TraceMode::Exact, None);
    let ones = Tensor::column(vec![1.0; n]);
    let e = map.joint_jvp(x, t, s, Some(&v), Some(&ones), None);
    let mut eulerian = Vec::with_capacity(n);
    for r in 0..n {
        let mut sq = 0.0;
        for c in 0..d {
            let i = r * d + c;
            let rx = v.data()[i] - e.u.data()[i] + gap[r] * e.du.data()[i];
            sq += rx * rx;
        }
        let rz = -e.d.data()[r] + gap[r] * e.dd.data()[r] - div_v[r];
        eulerian.push((sq + rz * rz).sqrt());
    }

    // ── Lagrangian: ∂_s Φ(x,t,s) = f(Φ(x,t,s), s, s) ─────────────────
    // X row: u + (s-t)·∂_s u - v_ref(Φ, s)
    // Z row: D + (s-t)·∂_s D + div(v_ref(Φ, s))
    let l = map.joint_jvp(x, t, s, None, None, Some(&ones));
    let phi = x.add(&l.u.mul_col(&gap_col));
    let (v_phi, div_phi) = divergence(v_ref, &phi, s, TraceMode::Exact, None);
    let mut lagrangian = Vec::with_capacity(n);
    for r in 0..n {
        let mut sq = 0.0;
        for c in 0..d {
            let i = r * d + c;
            let rx = l.u.data()[i] + gap[r] * l.du.data()[i] - v_phi.data()[i];
            sq += rx * rx;
        }
        let rz = l.d.data()[r] + gap[r] * l.dd.data()[r] + div_phi[r];
        lagrangian.push((sq + rz * rz).sqrt());
    }

    // ── Semigroup: Φ(x,t,s) = Φ(Φ(x,t,r), r, s) at r = (t+s)/2 ──────
    let r_col = t.add(s).scale(0.5);
    let (u_tr, d_tr) = map.joint(x, t, &r_col);
    let half1 = r_col.sub(t);
    let x_r = x.add(&u_tr.mul_col(&half1));
    let (u_rs, d_rs) = map.joint(&x_r, &r_col, s);
    let half2 = s.sub(&r_col);
    let x_two = x_r.add(&u_rs.mul_col(&half2));
    let (u_ts, d_ts) = map.joint(x, t, s);
    let x_direct = x.add(&u_ts.mul_col(&gap_col));
    let mut semigroup = Vec::with_capacity(n);
    for r in 0..n {
        let mut sq = 0.0;
        for c in 0..d {
            let i = r * d + c;
            let rx = x_direct.data()[i] - x_two.data()[i];
            sq += rx * rx;
        }
        let rz = gap[r] * d_ts.data()[r]
            - (half1.data()[r] * d_tr.data()[r] + half2.data()[r] * d_rs.data()[r]);
        semigroup.push((sq + rz * rz).sqrt());
    }

    ResidualNorms {
        lagrangian,
        eulerian,
        semigroup,
    }
}
