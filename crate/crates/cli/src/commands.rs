use std::path::{Path, PathBuf};

use serde_json::json;
use xsrc::analysis::{
    assemble_effective_layer, concat_states, layer_readout, linear_reconstruct, modal_decomposition, rmse_curve, rmse_map,
};
use xsrc::experiments::{grid_search, sweep_table_csv};
use xsrc::field::{load_grid_series_csv, write_grid_series, GridSeries};
use xsrc::hierarchy::{forecast, load_model, train_hierarchy, write_model, HierarchyModel};
use xsrc::{Error, Result};

use crate::config::{as_input_error, load_series, RunConfig};
use crate::output::{csv_text, fmt, log, write_output, write_outputs};
use crate::{Cli, Command};

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Gen => gen(cli),
        Command::ConvertCsv { input } => convert_csv(cli, input),
        Command::Train => train(cli),
        Command::Forecast { model } => cmd_forecast(cli, model.as_deref()),
        Command::Eval {
            forecast,
            truth,
            reference,
            horizons,
            map_horizon,
        } => eval(cli, forecast, truth, reference.as_deref(), horizons, *map_horizon),
        Command::Sweep => sweep(cli),
        Command::Modes {
            model,
            level,
            frozen_parent,
            steps,
        } => modes(cli, model.as_deref(), *level, *frozen_parent, *steps),
    }
}

fn load_config(cli: &Cli) -> Result<(RunConfig, PathBuf)> {
    let path = cli.config.as_ref().ok_or_else(|| Error::Config {
        field: "--config".into(),
        message: "this command needs a run configuration".into(),
    })?;
    let (cfg, base) = RunConfig::load(path)?;
    log("config", json!({ "path": path.display().to_string(), "hash": cfg.hash() }));
    Ok((cfg, base))
}

/// `--out` when given, otherwise `default` under the configured output
/// directory.
fn out_path(cli: &Cli, cfg: Option<(&RunConfig, &Path)>, default: &str) -> Result<PathBuf> {
    if let Some(o) = &cli.out {
        return Ok(o.clone());
    }
    match cfg {
        Some((c, base)) => Ok(c.output_dir(base).join(default)),
        None => Err(Error::Config {
            field: "--out".into(),
            message: "an output path is required without --config".into(),
        }),
    }
}

fn gen(cli: &Cli) -> Result<()> {
    let (cfg, base) = load_config(cli)?;
    let spec = cfg.data.synth.as_ref().ok_or_else(|| Error::Config {
        field: "data.synth".into(),
        message: "gen needs a synthetic data specification".into(),
    })?;
    let series = cfg.load_data(&base, cli.seed)?;
    let out = out_path(cli, Some((&cfg, &base)), "data.fgrid")?;
    write_output(&out, &write_grid_series(&series), cli.force)?;
    let components: Vec<String> = spec.components.iter().map(|c| format!("{c:?}")).collect();
    log(
        "gen",
        json!({
            "out": out.display().to_string(),
            "n_time": series.n_time(),
            "n_rows": series.n_rows(),
            "n_cols": series.n_cols(),
            "seed": cli.seed.unwrap_or(spec.seed),
            "components": components,
        }),
    );
    Ok(())
}

fn convert_csv(cli: &Cli, input: &Path) -> Result<()> {
    let series = load_grid_series_csv(input).map_err(|e| as_input_error(input, e))?;
    let out = match &cli.out {
        Some(o) => o.clone(),
        None => input.with_extension("fgrid"),
    };
    write_output(&out, &write_grid_series(&series), cli.force)?;
    log(
        "convert-csv",
        json!({
            "out": out.display().to_string(),
            "n_time": series.n_time(),
            "n_rows": series.n_rows(),
            "n_cols": series.n_cols(),
            "n_valid": series.n_valid(),
        }),
    );
    Ok(())
}

fn train(cli: &Cli) -> Result<()> {
    let (cfg, base) = load_config(cli)?;
    let model_cfg = cfg.model(cli.seed)?;
    let data = cfg.load_data(&base, None)?;
    let splits = cfg.split(&data)?;
    let model = train_hierarchy(&model_cfg, &splits.train)?;
    let bytes = write_model(&model)?;
    let out = out_path(cli, Some((&cfg, &base)), "model.xsrc")?;
    write_output(&out, &bytes, cli.force)?;
    log(
        "train",
        json!({
            "out": out.display().to_string(),
            "model_hash": model.provenance.config_hash,
            "reservoirs": model.reservoir_counts(),
            "train_frames": splits.train.n_time(),
        }),
    );
    Ok(())
}

fn load_checkpoint(cfg: &RunConfig, base: &Path, model: Option<&Path>) -> Result<HierarchyModel> {
    let path = match model {
        Some(p) => p.to_path_buf(),
        None => cfg.output_dir(base).join("model.xsrc"),
    };
    let m = load_model(&path).map_err(|e| as_input_error(&path, e))?;
    log("model", json!({ "path": path.display().to_string(), "seed": m.provenance.master_seed }));
    Ok(m)
}

/// Test split, or an error naming the training section.
fn test_split(cfg: &RunConfig, data: &GridSeries) -> Result<GridSeries> {
    cfg.split(data)?.test.ok_or_else(|| Error::Config {
        field: "training".into(),
        message: "the split fractions leave no test frames".into(),
    })
}

fn cmd_forecast(cli: &Cli, model_path: Option<&Path>) -> Result<()> {
    let (cfg, base) = load_config(cli)?;
    let model = load_checkpoint(&cfg, &base, model_path)?;
    let windows = cfg.windows()?;
    let data = cfg.load_data(&base, None)?;
    let test = test_split(&cfg, &data)?;
    windows.validate(test.n_time())?;
    let dir = out_path(cli, Some((&cfg, &base)), "forecast")?;
    let mut activity_rows = Vec::new();
    let mut outputs = Vec::new();
    for i in 0..windows.n_windows {
        let start = i * windows.stride;
        let warm = test.slice_time(start, start + windows.warmup)?;
        let truth = test.slice_time(start + windows.warmup, start + windows.warmup + windows.horizon)?;
        let result = forecast(&model, &warm, windows.horizon)?;
        for layer in &result.layers {
            activity_rows.push(vec![
                i.to_string(),
                layer.level.to_string(),
                fmt(layer.activity.preactivation_max),
                fmt(layer.activity.state_max),
            ]);
        }
        let predicted = result.finest().to_series(test.meta)?;
        outputs.push((dir.join(format!("forecast_{i}.fgrid")), write_grid_series(&predicted)));
        outputs.push((dir.join(format!("truth_{i}.fgrid")), write_grid_series(&truth)));
    }
    outputs.push((
        dir.join("activity.csv"),
        csv_text(&["window", "level", "preactivation_max", "state_max"], activity_rows),
    ));
    write_outputs(&outputs, cli.force)?;
    log(
        "forecast",
        json!({ "out": dir.display().to_string(), "windows": windows.n_windows, "horizon": windows.horizon }),
    );
    Ok(())
}

fn eval(
    cli: &Cli,
    forecast_path: &Path,
    truth_path: &Path,
    reference: Option<&Path>,
    horizons: &[usize],
    map_horizon: Option<usize>,
) -> Result<()> {
    let cfg = match &cli.config {
        Some(_) => Some(load_config(cli)?),
        None => None,
    };
    let dir = out_path(cli, cfg.as_ref().map(|(c, b)| (c, b.as_path())), "eval")?;
    let f = load_series(forecast_path)?;
    let truth = load_series(truth_path)?;
    let len = f.n_time().min(truth.n_time());
    let horizons: Vec<usize> = if horizons.is_empty() { (1..=len).collect() } else { horizons.to_vec() };
    let map_h = map_horizon.unwrap_or(len);
    let curve = rmse_curve(&f, &truth, &horizons)?;
    let map = rmse_map(&f, &truth, map_h)?;
    let mut outputs = vec![(dir.join("rmse_map.fgrid"), write_grid_series(&map))];
    match reference {
        None => {
            let rows = horizons.iter().zip(&curve).map(|(h, v)| vec![h.to_string(), fmt(*v)]);
            outputs.push((dir.join("rmse_curve.csv"), csv_text(&["T", "rmse"], rows)));
        }
        Some(r) => {
            let reference = load_series(r)?;
            let ref_curve = rmse_curve(&reference, &truth, &horizons)?;
            let rows = horizons
                .iter()
                .zip(curve.iter().zip(&ref_curve))
                .map(|(h, (a, b))| vec![h.to_string(), fmt(*a), fmt(*b), fmt(a / b)]);
            outputs.push((
                dir.join("rmse_curve.csv"),
                csv_text(&["T", "rmse", "rmse_reference", "ratio"], rows),
            ));
            let ref_map = rmse_map(&reference, &truth, map_h)?;
            let delta: Vec<f64> = map.values().iter().zip(ref_map.values()).map(|(a, b)| a - b).collect();
            outputs.push((dir.join("delta_rmse_map.fgrid"), write_grid_series(&map.with_values(1, delta)?)));
        }
    }
    write_outputs(&outputs, cli.force)?;
    log(
        "eval",
        json!({ "out": dir.display().to_string(), "rmse_final": curve.last(), "map_horizon": map_h }),
    );
    Ok(())
}

fn sweep(cli: &Cli) -> Result<()> {
    let (cfg, base) = load_config(cli)?;
    let template = cfg.model(cli.seed)?;
    let spec = cfg.sweep.as_ref().ok_or_else(|| Error::Config {
        field: "sweep".into(),
        message: "section is required".into(),
    })?;
    let data = cfg.load_data(&base, None)?;
    let splits = cfg.split(&data)?;
    let validate = splits.validate.ok_or_else(|| Error::Config {
        field: "training.validate_fraction".into(),
        message: "sweep needs a validation split".into(),
    })?;
    let outcome = grid_search(spec, &splits.train, &validate, &template)?;
    for f in &outcome.failures {
        log("sweep_failure", json!({ "message": f }));
    }
    let dir = out_path(cli, Some((&cfg, &base)), "sweep")?;
    let candidates = outcome.candidates.iter().map(|c| {
        vec![
            c.layer.to_string(),
            fmt(c.hyper.g),
            fmt(c.hyper.noise_std),
            fmt(c.hyper.g_in),
            fmt(c.hyper.g_l),
            fmt(c.hyper.tau),
            fmt(c.score),
        ]
    });
    let per_horizon = outcome.per_horizon_best.iter().enumerate().flat_map(|(l, best)| {
        spec.horizons
            .iter()
            .zip(best)
            .map(move |(h, &c)| vec![(l + 1).to_string(), h.to_string(), c.to_string()])
    });
    let outputs = [
        (dir.join("sweep.csv"), sweep_table_csv(&outcome.rows)?.into_bytes()),
        (
            dir.join("scores.csv"),
            csv_text(&["layer", "g", "noise", "g_in", "g_l", "tau", "score"], candidates),
        ),
        (
            dir.join("per_horizon_best.csv"),
            csv_text(&["layer", "T", "candidate"], per_horizon),
        ),
        (dir.join("selected_model.toml"), outcome.config.canonical_text().into_bytes()),
    ];
    write_outputs(&outputs, cli.force)?;
    log(
        "sweep",
        json!({ "out": dir.display().to_string(), "rows": outcome.rows.len(), "failures": outcome.failures.len() }),
    );
    Ok(())
}

fn modes(cli: &Cli, model_path: Option<&Path>, level: usize, frozen_parent: bool, steps: usize) -> Result<()> {
    let (cfg, base) = load_config(cli)?;
    let model = load_checkpoint(&cfg, &base, model_path)?;
    if level == 0 || level > model.n_layers() {
        return Err(Error::InvalidArgument(format!("level {level} outside 1..={}", model.n_layers())));
    }
    let windows = cfg.windows()?;
    let data = cfg.load_data(&base, None)?;
    let test = test_split(&cfg, &data)?;
    windows.validate(test.n_time())?;
    let warm = test.slice_time(0, windows.warmup)?;
    let run = forecast(&model, &warm, windows.horizon)?;
    let layer = &model.layers[level - 1];
    let tau = layer.units[0].reservoir.hyper.tau;
    if layer.units.iter().any(|u| u.reservoir.hyper.tau != tau) {
        return Err(Error::InvalidArgument(format!("layer {level} mixes time constants")));
    }
    let w_eff = assemble_effective_layer(layer, frozen_parent)?;
    let w_out = layer_readout(layer)?;
    let r0 = concat_states(&run.layers[level - 1].initial_states);
    let md = modal_decomposition(&w_eff, &w_out, &r0, tau)?;

    let spectrum = (0..md.len()).map(|k| {
        vec![
            k.to_string(),
            fmt(md.lambda[k].re),
            fmt(md.lambda[k].im),
            fmt(md.weights[k].norm()),
            fmt(md.weights[k].re),
            fmt(md.weights[k].im),
            md.period(k).map(fmt).unwrap_or_default(),
            fmt(md.growth_rate(k)),
        ]
    });
    let total: f64 = md.weights.iter().map(|w| w.norm()).sum();
    let mut cumulative = 0.0;
    let weights: Vec<Vec<String>> = md
        .weights
        .iter()
        .enumerate()
        .map(|(k, w)| {
            cumulative += w.norm();
            let frac = |v: f64| if total > 0.0 { v / total } else { 0.0 };
            vec![k.to_string(), fmt(w.norm()), fmt(frac(w.norm())), fmt(frac(cumulative))]
        })
        .collect();
    // leading pair (or mode) trajectory: w_k exp((lambda_k - 1) t / tau)
    let times: Vec<f64> = (0..steps).map(|t| t as f64).collect();
    let lead = md.paired_cutoff(1);
    let trajectory = times.iter().map(|&t| {
        let mut row = vec![fmt(t)];
        for k in 0..lead {
            let v = md.mode_contribution(k, t);
            row.push(fmt(v.re));
            row.push(fmt(v.im));
        }
        row
    });
    let mut header = vec!["t".to_string()];
    for k in 0..lead {
        header.push(format!("mode{k}_re"));
        header.push(format!("mode{k}_im"));
    }
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let recon = linear_reconstruct(&md, &times, None)?;
    let recon_rows = (0..steps).map(|j| vec![fmt(times[j]), fmt(recon.column(j).sum())]);
    let activity = run.layers.iter().map(|l| {
        vec![
            l.level.to_string(),
            fmt(l.activity.preactivation_max),
            fmt(l.activity.state_max),
        ]
    });

    let dir = out_path(cli, Some((&cfg, &base)), "modes")?;
    let outputs = [
        (
            dir.join("spectrum.csv"),
            csv_text(
                &["rank", "re", "im", "abs_weight", "weight_re", "weight_im", "period", "growth_rate"],
                spectrum,
            ),
        ),
        (
            dir.join("weights.csv"),
            csv_text(&["rank", "abs_weight", "fraction", "cumulative_fraction"], weights),
        ),
        (dir.join("trajectories.csv"), csv_text(&header_refs, trajectory)),
        (dir.join("linear_output.csv"), csv_text(&["t", "output_sum"], recon_rows)),
        (
            dir.join("activity.csv"),
            csv_text(&["level", "preactivation_max", "state_max"], activity),
        ),
    ];
    write_outputs(&outputs, cli.force)?;
    log(
        "modes",
        json!({
            "out": dir.display().to_string(),
            "level": level,
            "modes": md.len(),
            "residual": md.residual,
            "leading_period": md.period(0),
        }),
    );
    Ok(())
}
