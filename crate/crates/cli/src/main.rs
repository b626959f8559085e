use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use kvn_cli::{cmd_eval, cmd_gen, cmd_gradcheck, cmd_solve, cmd_vote, RunConfig};

/// Stereo keypoint voting and uncertainty-weighted PnP on synthetic scenes.
#[derive(Parser)]
#[command(name = "kvn", version)]
struct Cli {
    /// Master seed for all randomness.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON configuration; command-line flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for all outputs (and default inputs).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene with voting targets.
    Gen {
        #[arg(long)]
        width: Option<u32>,
        #[arg(long)]
        height: Option<u32>,
        #[arg(long)]
        keypoints: Option<usize>,
        #[arg(long)]
        model_points: Option<usize>,
        /// Single camera instead of a stereo pair.
        #[arg(long)]
        mono: bool,
        #[arg(long)]
        baseline: Option<f64>,
        #[arg(long)]
        symmetric: bool,
        /// Rotation noise on every vote, radians.
        #[arg(long)]
        noise_sigma: Option<f64>,
        #[arg(long)]
        outlier_fraction: Option<f64>,
        #[arg(long)]
        flip_fraction: Option<f64>,
    },
    /// Estimate keypoints and covariances by RANSAC voting.
    Vote {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        pool: Option<usize>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Solve for the object pose.
    Solve {
        #[arg(long)]
        problem: Option<PathBuf>,
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        estimates: Option<PathBuf>,
        /// Plain reprojection error instead of covariance weighting.
        #[arg(long)]
        unweighted: bool,
        #[arg(long)]
        g_tol: Option<f64>,
        #[arg(long)]
        x_tol: Option<f64>,
        #[arg(long)]
        max_iter: Option<usize>,
    },
    /// Compute ADD(-S), <2cm, AUC and MAE.
    Eval {
        /// JSON lines of evaluation samples.
        #[arg(long)]
        samples: Option<PathBuf>,
        #[arg(long)]
        scene: Vec<PathBuf>,
        #[arg(long)]
        solution: Vec<PathBuf>,
        #[arg(long)]
        max_threshold: Option<f64>,
    },
    /// Compare analytic loss gradients with finite differences.
    Gradcheck {
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        keypoints: Option<usize>,
        #[arg(long)]
        pool: Option<usize>,
        #[arg(long)]
        step: Option<f64>,
        #[arg(long)]
        alpha: Option<f64>,
    },
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("KVN_THREADS") {
        let n: usize = v.parse().with_context(|| format!("KVN_THREADS={v} is not a count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    set(&mut cfg.seed, cli.seed);
    set(&mut cfg.out_dir, cli.out_dir);

    match cli.command {
        Command::Gen {
            width,
            height,
            keypoints,
            model_points,
            mono,
            baseline,
            symmetric,
            noise_sigma,
            outlier_fraction,
            flip_fraction,
        } => {
            let g = &mut cfg.gen;
            set(&mut g.width, width);
            set(&mut g.height, height);
            set(&mut g.n_keypoints, keypoints);
            set(&mut g.n_model_points, model_points);
            set(&mut g.baseline, baseline);
            set(&mut g.angular_noise_sigma, noise_sigma);
            set(&mut g.outlier_fraction, outlier_fraction);
            set(&mut g.mask_flip_fraction, flip_fraction);
            g.stereo &= !mono;
            g.symmetric |= symmetric;
            let out = cmd_gen(&cfg)?;
            println!("{}", out.manifest.display());
        }
        Command::Vote {
            manifest,
            rounds,
            pool,
            threshold,
        } => {
            let v = &mut cfg.vote;
            v.manifest = manifest.or(v.manifest.take());
            set(&mut v.rounds, rounds);
            set(&mut v.covariance_pool, pool);
            set(&mut v.inlier_threshold, threshold);
            let est = cmd_vote(&cfg)?;
            for f in &est.failures {
                eprintln!("camera {} keypoint {}: {}", f.camera, f.keypoint, f.error);
            }
            println!("{}", cfg.out_dir.join(kvn_cli::ESTIMATES_FILE).display());
        }
        Command::Solve {
            problem,
            scene,
            estimates,
            unweighted,
            g_tol,
            x_tol,
            max_iter,
        } => {
            let s = &mut cfg.solve;
            s.problem = problem.or(s.problem.take());
            s.scene = scene.or(s.scene.take());
            s.estimates = estimates.or(s.estimates.take());
            s.unweighted |= unweighted;
            set(&mut s.g_tol, g_tol);
            set(&mut s.x_tol, x_tol);
            set(&mut s.max_iter, max_iter);
            let sol = cmd_solve(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&sol)?);
        }
        Command::Eval {
            samples,
            scene,
            solution,
            max_threshold,
        } => {
            let e = &mut cfg.eval;
            e.samples = samples.or(e.samples.take());
            if !scene.is_empty() || !solution.is_empty() {
                e.scenes = scene;
                e.solutions = solution;
            }
            set(&mut e.max_threshold, max_threshold);
            let out = cmd_eval(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&out.report)?);
        }
        Command::Gradcheck {
            width,
            height,
            keypoints,
            pool,
            step,
            alpha,
        } => {
            let g = &mut cfg.gradcheck;
            set(&mut g.width, width);
            set(&mut g.height, height);
            set(&mut g.n_keypoints, keypoints);
            set(&mut g.pool_size, pool);
            set(&mut g.step, step);
            set(&mut g.alpha, alpha);
            let report = cmd_gradcheck(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
