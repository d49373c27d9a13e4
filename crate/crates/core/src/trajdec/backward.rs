use nalgebra::DVector;

use super::{
    check_len, mse_loss, unroll, DecoderConfig, DecoderError, DecoderWeights, StopRule, Trajectory,
    POSE_DIM,
};

/// Gradient of a scalar loss with respect to every decoder parameter, laid
/// out like the weights themselves.
pub type Gradients = DecoderWeights;

#[derive(Debug, Clone)]
pub struct BackwardResult {
    pub loss: f64,
    pub grads: Gradients,
    pub trajectory: Trajectory,
}

/// Analytic gradient of `mse_loss(decode(h_tra), gt)`.
///
/// The number of unrolled steps is taken from the forward pass and held
/// fixed: no gradient flows through the stopping decision.
pub fn backward(
    h_tra: &DVector<f64>,
    w: &DecoderWeights,
    cfg: &DecoderConfig,
    gt: &[[f64; POSE_DIM]],
) -> Result<BackwardResult, DecoderError> {
    w.check_against(cfg)?;
    check_len("h_tra", h_tra, cfg.d_e)?;
    if gt.is_empty() {
        return Err(DecoderError::EmptyGroundTruth);
    }
    let un = unroll(
        h_tra,
        w,
        StopRule::Threshold {
            max_steps: cfg.max_steps,
            threshold: cfg.threshold,
        },
    );
    let trajectory = un.trajectory();
    let loss = mse_loss(&trajectory.as_rows(), gt)?;

    let d_h = cfg.d_h;
    let k = un.steps.len().min(gt.len());
    let scale = 2.0 / (POSE_DIM * k.max(1)) as f64;
    let mut g = Gradients::zeros(cfg.d_e, d_h);
    let mut dh_next = DVector::zeros(d_h);

    for (t, (h_prev, f, gru, state)) in un.steps.iter().enumerate().rev() {
        let mut dh = dh_next;
        if t < k {
            let d_out = DVector::from_fn(POSE_DIM, |i, _| {
                let s = state.0[i];
                scale * (s - gt[t][i]) * s * (1.0 - s)
            });
            g.w_out += &d_out * gru.h.transpose();
            g.b_out += &d_out;
            dh += w.w_out.tr_mul(&d_out);
        }

        let dz = dh.component_mul(&(&gru.c - h_prev));
        let dc = dh.component_mul(&gru.z);
        let mut dh_prev = dh.component_mul(&gru.z.map(|z| 1.0 - z));

        // candidate: c = tanh(W_c f + U_c (r*h) + b_c)
        let da_c = dc.component_mul(&gru.c.map(|c| 1.0 - c * c));
        let rh = gru.r.component_mul(h_prev);
        g.w_c += &da_c * f.transpose();
        g.u_c += &da_c * rh.transpose();
        g.b_c += &da_c;
        let mut df = w.w_c.tr_mul(&da_c);
        let d_rh = w.u_c.tr_mul(&da_c);
        let dr = d_rh.component_mul(h_prev);
        dh_prev += d_rh.component_mul(&gru.r);

        // update gate
        let da_z = dz.component_mul(&gru.z.map(|z| z * (1.0 - z)));
        g.w_z += &da_z * f.transpose();
        g.u_z += &da_z * h_prev.transpose();
        g.b_z += &da_z;
        df += w.w_z.tr_mul(&da_z);
        dh_prev += w.u_z.tr_mul(&da_z);

        // reset gate
        let da_r = dr.component_mul(&gru.r.map(|r| r * (1.0 - r)));
        g.w_r += &da_r * f.transpose();
        g.u_r += &da_r * h_prev.transpose();
        g.b_r += &da_r;
        df += w.w_r.tr_mul(&da_r);
        dh_prev += w.u_r.tr_mul(&da_r);

        // state projection: f = W_state h_prev + b_state
        g.w_state += &df * h_prev.transpose();
        g.b_state += &df;
        dh_prev += w.w_state.tr_mul(&df);

        dh_next = dh_prev;
    }

    g.w_latent += &dh_next * h_tra.transpose();
    g.b_latent += &dh_next;
    debug_assert_eq!(un.h0.len(), d_h);

    Ok(BackwardResult {
        loss,
        grads: g,
        trajectory,
    })
}

/// Central-difference gradient of `loss_fn` at `w`, one entry at a time.
pub fn grad_fd(
    loss_fn: impl Fn(&DecoderWeights) -> f64,
    w: &DecoderWeights,
    eps: f64,
) -> Gradients {
    assert!(eps > 0.0, "finite-difference step must be positive");
    let base = w.to_flat();
    let mut probe = w.clone();
    let mut out = vec![0.0; base.len()];
    let mut flat = base.clone();
    for i in 0..base.len() {
        flat[i] = base[i] + eps;
        probe.set_flat(&flat);
        let up = loss_fn(&probe);
        flat[i] = base[i] - eps;
        probe.set_flat(&flat);
        let down = loss_fn(&probe);
        flat[i] = base[i];
        out[i] = (up - down) / (2.0 * eps);
    }
    let mut g = w.clone();
    g.set_flat(&out);
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajdec::{decode, decode_fixed, random_latent};

    #[test]
    fn fd_on_quadratic_is_exact() {
        // loss = sum (w_i - i)^2, gradient 2 (w_i - i)
        let w = DecoderWeights::uniform(2, 2, 1.0, 3);
        let target: Vec<f64> = (0..w.param_count()).map(|i| i as f64 * 0.01).collect();
        let loss = |w: &DecoderWeights| {
            w.to_flat()
                .iter()
                .zip(&target)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
        };
        let g = grad_fd(loss, &w, 1e-3).to_flat();
        for ((gi, wi), ti) in g.iter().zip(w.to_flat()).zip(&target) {
            assert!((gi - 2.0 * (wi - ti)).abs() < 1e-9);
        }
    }

    #[test]
    fn fd_at_minimum_is_zero() {
        let w = DecoderWeights::uniform(2, 2, 1.0, 3);
        let center = w.to_flat();
        let loss = |v: &DecoderWeights| {
            v.to_flat()
                .iter()
                .zip(&center)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
        };
        assert!(grad_fd(loss, &w, 1e-4)
            .to_flat()
            .iter()
            .all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn own_output_is_a_fixed_point() {
        let w = DecoderWeights::uniform(3, 4, 0.5, 11);
        let h = random_latent(3, 1.0, 12);
        let cfg = crate::trajdec::DecoderConfig::new(3, 4, 5).with_threshold(1e-12);
        let gt = decode(&h, &w, &cfg).unwrap().as_rows();
        let r = backward(&h, &w, &cfg, &gt).unwrap();
        assert_eq!(r.loss, 0.0);
        assert!(r.grads.to_flat().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn matches_central_differences() {
        let (d_e, d_h, steps) = (3, 3, 4);
        let w = DecoderWeights::uniform(d_e, d_h, 0.8, 5);
        let h = random_latent(d_e, 1.0, 6);
        let cfg = crate::trajdec::DecoderConfig::new(d_e, d_h, steps).with_threshold(1e-30);
        let gt = [
            [0.1, 0.9, 0.3, 0.7, 0.5, 0.2],
            [0.2, 0.8, 0.3, 0.6, 0.5, 0.3],
            [0.3, 0.7, 0.4, 0.5, 0.5, 0.4],
        ];
        let r = backward(&h, &w, &cfg, &gt).unwrap();
        let n = r.trajectory.len();
        let fd = grad_fd(
            |w| mse_loss(&rows(&decode_fixed(&h, w, n).unwrap()), &gt).unwrap(),
            &w,
            1e-5,
        );
        for (a, f) in r.grads.to_flat().iter().zip(fd.to_flat()) {
            let denom = a.abs().max(f.abs()).max(1e-6);
            assert!((a - f).abs() / denom < 1e-4, "analytic {a} vs fd {f}");
        }
    }

    fn rows(states: &[crate::trajdec::TrajState]) -> Vec<[f64; POSE_DIM]> {
        states.iter().map(|s| s.0).collect()
    }
}
