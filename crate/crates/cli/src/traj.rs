//! `rsvl decode` and `rsvl fit`.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rsvl_core::trajdec::{
    decode as run_decoder, fit as run_fit, DecoderConfig, DecoderError, FitOptions, Termination,
    WeightFile, POSE_DIM,
};
use serde::Serialize;

use crate::error::{CliError, Status};
use crate::jsonl;
use crate::{DecodeArgs, FitArgs};

fn decoder_error(e: DecoderError) -> CliError {
    match e {
        DecoderError::DivergenceDetected { .. } => CliError::Internal(e.to_string()),
        _ => CliError::format(e.to_string()),
    }
}

fn load_latent(path: &Path) -> Result<DVector<f64>, CliError> {
    let (v, _): (Vec<f64>, _) = jsonl::read_json(path)?;
    if v.is_empty() {
        return Err(CliError::format(format!(
            "{}: latent vector is empty",
            path.display()
        )));
    }
    Ok(DVector::from_vec(v))
}

#[derive(Serialize)]
struct DecodeOutput<'a> {
    steps: usize,
    terminated_by: Termination,
    states: &'a [[f64; POSE_DIM]],
}

pub fn decode(args: &DecodeArgs, out: &mut (dyn Write + Send)) -> Result<Status, CliError> {
    let (wf, _): (WeightFile, _) = jsonl::read_json(&args.weights)?;
    let weights = wf
        .to_weights()
        .map_err(|e| CliError::format(format!("{}: {e}", args.weights.display())))?;
    let latent = load_latent(&args.latent)?;
    let cfg = DecoderConfig::new(wf.d_e, wf.d_h, args.max_steps).with_threshold(args.threshold);
    cfg.validate().map_err(decoder_error)?;
    let traj = run_decoder(&latent, &weights, &cfg).map_err(decoder_error)?;
    let rows = traj.as_rows();

    let text = if args.json {
        let o = DecodeOutput {
            steps: rows.len(),
            terminated_by: traj.terminated_by,
            states: &rows,
        };
        let mut s = serde_json::to_string(&o).map_err(|e| CliError::Internal(e.to_string()))?;
        s.push('\n');
        s
    } else {
        let mut s = String::new();
        for (i, r) in rows.iter().enumerate() {
            let vals: Vec<String> = r.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "step {}: {}", i + 1, vals.join(" "));
        }
        let term = match traj.terminated_by {
            Termination::Threshold => "threshold",
            Termination::MaxSteps => "max_steps",
        };
        let _ = writeln!(s, "steps: {}", rows.len());
        let _ = writeln!(s, "terminated_by: {term}");
        s
    };
    out.write_all(text.as_bytes())
        .map_err(|e| CliError::io(Path::new("<stdout>"), e))?;
    Ok(Status::Ok)
}

fn load_targets(path: &Path) -> Result<Vec<[f64; POSE_DIM]>, CliError> {
    let (rows, _): (Vec<[f64; POSE_DIM]>, _) = jsonl::read_json(path)?;
    if rows.is_empty() {
        return Err(CliError::format(format!(
            "{}: no target states",
            path.display()
        )));
    }
    for (i, r) in rows.iter().enumerate() {
        if let Some(v) = r.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
            return Err(CliError::format(format!(
                "{}: target {i} has value {v} outside (0, 1)",
                path.display()
            )));
        }
    }
    Ok(rows)
}

fn loss_path(args: &FitArgs) -> PathBuf {
    args.loss_out
        .clone()
        .unwrap_or_else(|| args.weights_out.with_extension("loss.csv"))
}

#[derive(Serialize)]
struct FitSummary {
    iterations: usize,
    initial_loss: f64,
    final_loss: f64,
    weights: PathBuf,
    loss_curve: PathBuf,
}

pub fn fit(
    args: &FitArgs,
    out: &mut (dyn Write + Send),
    err: &mut (dyn Write + Send),
) -> Result<Status, CliError> {
    let targets = load_targets(&args.targets)?;
    let latent = load_latent(&args.latent)?;
    if !(args.init_scale.is_finite() && args.init_scale >= 0.0) {
        return Err(CliError::format(format!(
            "--init-scale must be non-negative, got {}",
            args.init_scale
        )));
    }
    let steps = args.max_steps.unwrap_or(targets.len());
    let cfg = DecoderConfig::new(latent.len(), args.d_h, steps).with_threshold(args.threshold);
    cfg.validate().map_err(decoder_error)?;
    let opts = FitOptions {
        lr: args.lr,
        iters: args.iters,
        seed: args.seed,
        init_scale: args.init_scale,
    };
    let r = run_fit(&latent, &targets, &cfg, &opts).map_err(decoder_error)?;

    let mut weights = serde_json::to_string_pretty(&WeightFile::from(&r.weights))
        .map_err(|e| CliError::Internal(e.to_string()))?;
    weights.push('\n');
    let mut csv = String::from("iteration,loss\n");
    for (i, l) in r.losses.iter().enumerate() {
        let _ = writeln!(csv, "{i},{l}");
    }
    let lp = loss_path(args);
    jsonl::write_file(&args.weights_out, weights.as_bytes())?;
    jsonl::write_file(&lp, csv.as_bytes())?;
    let _ = writeln!(
        err,
        "{} iterations: loss {} -> {}",
        args.iters,
        r.initial_loss(),
        r.final_loss()
    );
    if args.json {
        let s = FitSummary {
            iterations: args.iters,
            initial_loss: r.initial_loss(),
            final_loss: r.final_loss(),
            weights: args.weights_out.clone(),
            loss_curve: lp,
        };
        let line = serde_json::to_string(&s).map_err(|e| CliError::Internal(e.to_string()))?;
        let _ = writeln!(out, "{line}");
    }
    Ok(Status::Ok)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn temp(name: &str, body: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("rsvl-traj-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn targets_must_lie_strictly_inside_the_unit_interval() {
        let ok = temp("ok.json", "[[0.1,0.2,0.3,0.4,0.5,0.6]]");
        assert_eq!(load_targets(&ok).unwrap().len(), 1);
        for (name, body) in [
            ("zero.json", "[[0.0,0.2,0.3,0.4,0.5,0.6]]"),
            ("one.json", "[[0.1,0.2,0.3,0.4,0.5,1.0]]"),
            ("empty.json", "[]"),
            ("short.json", "[[0.1,0.2]]"),
        ] {
            let e = load_targets(&temp(name, body)).unwrap_err();
            assert_eq!(e.status(), Status::Format, "{name}");
        }
    }

    #[test]
    fn default_loss_path_sits_next_to_the_weights() {
        let args = FitArgs {
            targets: "t.json".into(),
            latent: "h.json".into(),
            weights_out: "out/w.json".into(),
            loss_out: None,
            lr: 0.1,
            iters: 1,
            seed: 0,
            d_h: 2,
            init_scale: 0.1,
            max_steps: None,
            threshold: 1e-3,
            json: false,
        };
        assert_eq!(loss_path(&args), PathBuf::from("out/w.loss.csv"));
    }

    #[test]
    fn divergence_maps_to_internal_error() {
        let e = decoder_error(DecoderError::DivergenceDetected { iteration: 3 });
        assert_eq!(e.status(), Status::Internal);
        let e = decoder_error(DecoderError::EmptyGroundTruth);
        assert_eq!(e.status(), Status::Format);
    }
}
