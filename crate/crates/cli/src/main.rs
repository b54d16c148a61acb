//! Batch command-line front end.
//!
//! Usage: `gcgp <preprocess|train|eval|verify> [--config PATH] [--seed N]
//! [--out-dir DIR] [--suite NAME] [--KEY VALUE]...`
//!
//! Any configuration key can be overridden on the command line as
//! `--key value`. Exit codes: 0 success, 1 user/config error, 2 numerical
//! failure, 3 verification failure.

mod commands;
mod config;
mod tasks;

use std::process::ExitCode;

use gcgp_core::Error;

use config::RunConfig;

const USAGE: &str = "\
gcgp: graph convolutional Gaussian processes

commands:
  preprocess   write weight tensor / geodesic table / patch matrix caches
  train        fit the classifier, write checkpoint and metrics log
  eval         evaluate a checkpoint (error rate and confusion matrix)
  verify       run the self-check suites against independent oracles

options:
  --config PATH    key = value configuration file
  --seed N         root random seed (also config key 'seed')
  --out-dir DIR    output directory (also config key 'out_dir')
  --suite NAME     verify suite: all, eq8, psd, gradients, fmm, elbo
  --KEY VALUE      override any configuration key

common config keys:
  task             toy-image | toy-superpixels | mnist | superpixels | synth-mesh
  j_bins, k_bins   angular / radial bin counts
  rho_init         comma-separated radial bin centers
  sigma_rho        radial bin width
  trainable        comma list of 'rho', 'sigma_rho' ('' freezes the weighting)
  batch_size, learning_rate, num_inducing, max_steps, mc_samples
  mnist_images, mnist_labels, mnist_test_images, mnist_test_labels
  train_per_class  per-class subsample of the training set (0 = all)
";

fn parse_args(args: &[String]) -> Result<(String, RunConfig, String), Error> {
    if args.is_empty() {
        return Err(Error::InvalidArgument("missing command; see --help".into()));
    }
    let command = args[0].clone();
    let mut overrides: Vec<(String, String)> = Vec::new();
    let mut config_path: Option<String> = None;
    let mut suite = "all".to_string();
    let mut i = 1;
    while i < args.len() {
        let arg = &args[i];
        let key = arg.strip_prefix("--").ok_or_else(|| {
            Error::InvalidArgument(format!("expected --key value, got '{arg}'"))
        })?;
        let value = args
            .get(i + 1)
            .ok_or_else(|| Error::InvalidArgument(format!("--{key} needs a value")))?
            .clone();
        match key {
            "config" => config_path = Some(value),
            "suite" => suite = value,
            "seed" => overrides.push(("seed".into(), value)),
            "out-dir" => overrides.push(("out_dir".into(), value)),
            other => overrides.push((other.replace('-', "_"), value)),
        }
        i += 2;
    }
    let mut cfg = match config_path {
        Some(path) => RunConfig::from_file(std::path::Path::new(&path))?,
        None => RunConfig::default(),
    };
    for (k, v) in overrides {
        cfg.set(&k, &v);
    }
    Ok((command, cfg, suite))
}

fn exit_code_for(err: &Error) -> ExitCode {
    match err {
        Error::Numerical(_) | Error::Divergence { .. } => ExitCode::from(2),
        _ => ExitCode::from(1),
    }
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--help" || a == "-h") || args.is_empty() {
        print!("{USAGE}");
        return if args.is_empty() {
            ExitCode::from(1)
        } else {
            ExitCode::SUCCESS
        };
    }
    let (command, cfg, suite) = match parse_args(&args) {
        Ok(parsed) => parsed,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let result = match command.as_str() {
        "preprocess" => commands::cmd_preprocess(&cfg),
        "train" => commands::cmd_train(&cfg),
        "eval" => commands::cmd_eval(&cfg),
        "verify" => match commands::cmd_verify(&cfg, &suite) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("verification failed");
                return ExitCode::from(3);
            }
            Err(e) => Err(e),
        },
        "export-meshes" => {
            let dir = cfg
                .get("mesh_dir")
                .map(std::path::PathBuf::from)
                .unwrap_or_else(|| cfg.out_dir().join("meshes"));
            commands::export_meshes(&cfg, &dir)
        }
        other => {
            eprintln!("error: unknown command '{other}'");
            eprint!("{USAGE}");
            return ExitCode::from(1);
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}
