//! Pipeline behind the `ucos-dot` binary.
//!
//! Every stage reads and writes fixed file names inside one working
//! directory:
//!
//! | stage            | writes                                                        |
//! |------------------|---------------------------------------------------------------|
//! | `gen-data`       | `dataset.dotdat`                                              |
//! | `build-operator` | `operator.spmat`, `data_operator.spmat`, `offset.f64`, `data.f64`, `truth.dotdat` |
//! | `train`          | `checkpoint.spnet` (ucos) or `prior.spnet` (unconditional), `train_log-<mode>.csv` |
//! | `sample`         | `samples-<method>.spens`                                      |
//! | `stats`          | `stats-<method>/…` CSV and PGM images, `summary.txt`           |
//! | `verify`         | `verify.txt`                                                  |
//!
//! Ensembles, tables, images and reports carry the configuration digest
//! inline; the other binary artifacts get a `<file>.digest` sidecar.

pub mod config;
pub mod export;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

use ucos_core::autodiff::{Activation, NetConfig, NetProfile, ScoreNetwork};
use ucos_core::diffusion::{mixture_rate_check, DiffusionSchedule, Gaussian1d, TimePoint};
use ucos_core::dotfwd::{
    forward_data, jacobian, simulate_difference_data, Geometry, Instrument, NoiseModel,
    OpticalField,
};
use ucos_core::dps::{sample_dps, train_unconditional, DpsConfig};
use ucos_core::ensemble::{ensemble_stats, Method, SampleEnsemble};
use ucos_core::gaussian::{
    analytic_posterior, gaussian_posterior_score, ou_covariance, CovarianceOperator,
};
use ucos_core::operator::{
    read_data_vector_file, read_matrix_file, write_data_vector_file, write_matrix_file,
    DenseMatrixOperator, LinearOperator,
};
use ucos_core::phantom::{
    generate_dataset, ood_phantoms, read_dataset, render, write_dataset, Disk, PhantomSpec,
};
use ucos_core::rng::{master_rng, standard_normal_vec};
use ucos_core::ucos::{
    conditional_score, sample_posterior, train, GaussianDenoiser, GaussianPrior, LossWeighting,
    NetworkDenoiser, TrainingConfig, UcosProblem,
};
use ucos_core::{Field, PixelGrid};

pub use config::Config;
use export::{Quantity, CHANNEL_NAMES};

pub const DATASET_FILE: &str = "dataset.dotdat";
pub const OPERATOR_FILE: &str = "operator.spmat";
pub const DATA_OPERATOR_FILE: &str = "data_operator.spmat";
pub const OFFSET_FILE: &str = "offset.f64";
pub const DATA_FILE: &str = "data.f64";
pub const TRUTH_FILE: &str = "truth.dotdat";
pub const CHECKPOINT_FILE: &str = "checkpoint.spnet";
pub const PRIOR_CHECKPOINT_FILE: &str = "prior.spnet";
pub const VERIFY_FILE: &str = "verify.txt";

pub fn ensemble_file(method: Method) -> String {
    format!("samples-{method}.spens")
}

pub fn train_log_file(mode: &str) -> String {
    format!("train_log-{mode}.csv")
}

pub fn stats_dir(method: Method) -> String {
    format!("stats-{method}")
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] ucos_core::Error),

    #[error("{}: {source}", path.display())]
    Artifact {
        path: PathBuf,
        #[source]
        source: ucos_core::Error,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("verification failed: {0}")]
    Verification(String),
}

impl PipelineError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 2 for usage and configuration problems, 3 for numerical failures,
    /// 1 for I/O and malformed files.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Core(e) | PipelineError::Artifact { source: e, .. } => core_code(e),
            PipelineError::Io { .. } => 1,
            PipelineError::Verification(_) => 3,
        }
    }
}

fn core_code(e: &ucos_core::Error) -> i32 {
    use ucos_core::Error as E;
    match e {
        E::Usage(_) | E::Parameter(_) | E::Dimension { .. } => 2,
        E::Numerical(_) | E::Divergence { .. } | E::Training(_) | E::Measurement(_) => 3,
        E::Format(_) | E::Io(_) => 1,
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

fn at(path: &Path) -> impl FnOnce(ucos_core::Error) -> PipelineError + '_ {
    move |source| PipelineError::Artifact {
        path: path.to_path_buf(),
        source,
    }
}

/// Command-line values that override the configuration file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub method: Option<String>,
    pub alpha: Option<f64>,
    pub samples: Option<usize>,
    pub training_mode: Option<String>,
}

impl Config {
    /// Applies overrides and revalidates; the digest reflects the result.
    pub fn with_overrides(mut self, o: &Overrides) -> Result<Self> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(m) = &o.method {
            self.sampling.method = m.clone();
        }
        if let Some(a) = o.alpha {
            if self.sampling.method != "ucos-reg" {
                return Err(PipelineError::Config(format!(
                    "--alpha only applies to method ucos-reg (method is {})",
                    self.sampling.method
                )));
            }
            self.sampling.alpha = a;
        }
        if let Some(n) = o.samples {
            self.sampling.samples = n;
        }
        if let Some(m) = &o.training_mode {
            self.training.mode = m.clone();
        }
        self.validate()?;
        Ok(self)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Command {
    GenData,
    BuildOperator,
    Train,
    Sample,
    Stats {
        ensembles: Vec<PathBuf>,
        truth: Option<PathBuf>,
        physical: bool,
    },
    Verify,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::BuildOperator => "build-operator",
            Command::Train => "train",
            Command::Sample => "sample",
            Command::Stats { .. } => "stats",
            Command::Verify => "verify",
        }
    }
}

/// What a command produced.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Outcome {
    pub artifacts: Vec<PathBuf>,
    pub summary: String,
}

/// Runs one pipeline stage in `out`. Sampling runs chains in parallel;
/// every other stage runs on a single thread.
pub fn run_pipeline(command: &Command, cfg: &Config, out: &Path) -> Result<Outcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| PipelineError::io(out, e))?;
    let ctx = Context {
        cfg,
        out,
        digest: cfg.digest_hex(),
    };
    match command {
        Command::Sample => ctx.sample(),
        other => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(1)
                .build()
                .map_err(|e| PipelineError::Config(format!("thread pool: {e}")))?;
            pool.install(|| match other {
                Command::GenData => ctx.gen_data(),
                Command::BuildOperator => ctx.build_operator(),
                Command::Train => ctx.train(),
                Command::Stats {
                    ensembles,
                    truth,
                    physical,
                } => ctx.stats(ensembles, truth.as_deref(), *physical),
                Command::Verify => ctx.verify(),
                Command::Sample => unreachable!(),
            })
        }
    }
}

struct Context<'a> {
    cfg: &'a Config,
    out: &'a Path,
    digest: String,
}

impl Context<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&self, path: &Path, bytes: &[u8]) -> Result<()> {
        std::fs::write(path, bytes).map_err(|e| PipelineError::io(path, e))
    }

    fn sidecar(&self, path: &Path) -> Result<PathBuf> {
        let mut name = path.as_os_str().to_owned();
        name.push(".digest");
        let side = PathBuf::from(name);
        self.write(&side, format!("{}\n", self.digest).as_bytes())?;
        Ok(side)
    }

    fn put_matrix(
        &self,
        name: &str,
        mat: &nalgebra::DMatrix<f64>,
        artifacts: &mut Vec<PathBuf>,
    ) -> Result<()> {
        let path = self.path(name);
        write_matrix_file(&path, mat).map_err(at(&path))?;
        artifacts.push(self.sidecar(&path)?);
        artifacts.push(path);
        Ok(())
    }

    fn put_vector(&self, name: &str, v: &[f64], artifacts: &mut Vec<PathBuf>) -> Result<()> {
        let path = self.path(name);
        write_data_vector_file(&path, v).map_err(at(&path))?;
        artifacts.push(self.sidecar(&path)?);
        artifacts.push(path);
        Ok(())
    }

    fn geometry(&self) -> Result<Geometry> {
        Ok(self.cfg.problem.geometry.parse()?)
    }

    fn grid(&self) -> Result<PixelGrid> {
        Ok(PixelGrid::square(
            self.cfg.problem.grid,
            self.geometry()?.extent(),
        )?)
    }

    fn noise(&self) -> NoiseModel {
        NoiseModel {
            sigma_amp: self.cfg.problem.sigma_amp,
            sigma_phase: self.cfg.problem.sigma_phase,
        }
    }

    fn schedule(&self) -> Result<DiffusionSchedule> {
        let s = &self.cfg.sampling;
        Ok(DiffusionSchedule::new(
            s.t_min, s.t_max, s.steps, s.beta_min, s.beta_max,
        )?)
    }

    fn diffusion_covariance(&self, grid: &PixelGrid) -> Result<CovarianceOperator> {
        let d = &self.cfg.diffusion;
        Ok(match d.covariance.as_str() {
            "ou" => ou_covariance(grid, d.sigma, d.ell_mm, 2)?,
            _ => CovarianceOperator::identity(grid.shape(2).len()),
        })
    }

    fn prior(&self, grid: &PixelGrid) -> Result<GaussianPrior> {
        let p = &self.cfg.prior;
        Ok(GaussianPrior {
            mean: Field::filled(grid.shape(2), p.mean),
            cov: ou_covariance(grid, p.sigma, p.ell_mm, 2)?,
        })
    }

    fn training_config(&self) -> TrainingConfig {
        let t = &self.cfg.training;
        let mut tc = TrainingConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            t_truncation: t.t_truncation,
            seed: self.cfg.stage_seed("train"),
            weighting: if t.weighting == "lambda2" {
                LossWeighting::Lambda2
            } else {
                LossWeighting::Uniform
            },
            ..TrainingConfig::default()
        };
        tc.optimizer.base_lr = t.lr_start;
        tc.optimizer.final_lr = t.lr_end;
        tc.optimizer.weight_decay = t.weight_decay;
        tc
    }

    fn load_operator(&self, name: &str, grid: &PixelGrid) -> Result<DenseMatrixOperator> {
        let path = self.path(name);
        let mat = read_matrix_file(&path).map_err(at(&path))?;
        DenseMatrixOperator::new(mat, grid.shape(2)).map_err(at(&path))
    }

    fn problem(&self) -> Result<UcosProblem> {
        let grid = self.grid()?;
        let a = self.load_operator(OPERATOR_FILE, &grid)?;
        let m = a.codomain_dim();
        Ok(UcosProblem::new(
            Arc::new(a),
            self.diffusion_covariance(&grid)?,
            self.noise().covariance(m)?,
            self.schedule()?,
        )?)
    }

    fn gen_data(&self) -> Result<Outcome> {
        let d = &self.cfg.dataset;
        let spec = PhantomSpec {
            grid: self.grid()?,
            channels: 2,
            inclusions: (d.min_inclusions, d.max_inclusions),
            radius_mm: (0.0, d.max_radius_mm),
            contrast: (0.0, 1.0),
            seed: self.cfg.stage_seed("dataset"),
        };
        let fields = generate_dataset(&spec, d.size)?;
        let path = self.path(DATASET_FILE);
        write_dataset(&path, &fields).map_err(at(&path))?;
        let side = self.sidecar(&path)?;
        Ok(Outcome {
            artifacts: vec![path, side],
            summary: format!(
                "{} phantoms on a {}x{} grid",
                fields.len(),
                spec.grid.height,
                spec.grid.width
            ),
        })
    }

    fn target(&self, grid: &PixelGrid) -> Result<Option<Field>> {
        let t = &self.cfg.target;
        Ok(match t.kind.as_str() {
            "disk" => {
                let disk = |contrast| Disk {
                    cx: t.center_mm[0],
                    cy: t.center_mm[1],
                    radius: t.radius_mm,
                    contrast,
                };
                Some(render(
                    grid,
                    &[vec![disk(t.contrast[0])], vec![disk(t.contrast[1])]],
                ))
            }
            "phantom" => {
                let d = &self.cfg.dataset;
                let spec = PhantomSpec {
                    grid: *grid,
                    channels: 2,
                    inclusions: (d.min_inclusions, d.max_inclusions),
                    radius_mm: (0.0, d.max_radius_mm),
                    contrast: (0.0, 1.0),
                    seed: t.phantom_seed,
                };
                Some(generate_dataset(&spec, 1)?.remove(0))
            }
            "ellipse" | "triangle" => ood_phantoms(grid)
                .into_iter()
                .find(|(name, _)| *name == t.kind)
                .map(|(_, f)| f),
            _ => None,
        })
    }

    fn build_operator(&self) -> Result<Outcome> {
        let geom = self.geometry()?;
        let inst = geom.instrument();
        let grid = self.grid()?;
        let inv = jacobian(&geom.background(grid.height)?, &inst)?.rescaled()?;
        let inv_mat = inv.operator.to_dense();
        let data_grid = self.cfg.problem.data_grid;
        let data_op = if data_grid == grid.height {
            inv.clone()
        } else {
            jacobian(&geom.background(data_grid)?, &inst)?
                .resampled_from(&grid)?
                .rescaled()?
        };
        let mut artifacts = Vec::new();
        self.put_matrix(OPERATOR_FILE, &inv_mat, &mut artifacts)?;
        self.put_matrix(
            DATA_OPERATOR_FILE,
            &data_op.operator.to_dense(),
            &mut artifacts,
        )?;
        self.put_vector(OFFSET_FILE, &inv.offset, &mut artifacts)?;

        let t = &self.cfg.target;
        let y = match self.target(&grid)? {
            Some(truth) => {
                // data-model difference data, moved into the inversion
                // model's shifted convention
                let mut y = simulate_difference_data(
                    &truth,
                    &data_op.operator,
                    &self.noise(),
                    t.noise_seed,
                )?;
                for ((v, od), oi) in y.iter_mut().zip(&data_op.offset).zip(&inv.offset) {
                    *v += od - oi;
                }
                let path = self.path(TRUTH_FILE);
                write_dataset(&path, std::slice::from_ref(&truth)).map_err(at(&path))?;
                artifacts.push(self.sidecar(&path)?);
                artifacts.push(path);
                y
            }
            None => {
                let src = t.data_file.as_ref().expect("validated");
                let delta = read_data_vector_file(src).map_err(at(src))?;
                inv.shift_data(&delta).map_err(at(src))?
            }
        };
        self.put_vector(DATA_FILE, &y, &mut artifacts)?;
        Ok(Outcome {
            artifacts,
            summary: format!(
                "{} geometry: {} data, {} unknowns, data simulated on {}x{}",
                geom.name(),
                inv_mat.nrows(),
                inv_mat.ncols(),
                data_grid,
                data_grid
            ),
        })
    }

    fn train(&self) -> Result<Outcome> {
        let grid = self.grid()?;
        let dataset_path = self.path(DATASET_FILE);
        let dataset = read_dataset(&dataset_path).map_err(at(&dataset_path))?;
        let n = &self.cfg.network;
        let mut net_cfg = NetConfig::profile(n.profile.parse::<NetProfile>()?, grid.shape(2));
        net_cfg.activation = n.activation.parse::<Activation>()?;
        let mut net = ScoreNetwork::new(net_cfg, &mut master_rng(self.cfg.stage_seed("init")))?;
        let tc = self.training_config();
        let (report, name) = if self.cfg.training.mode == "unconditional" {
            let c = self.diffusion_covariance(&grid)?;
            let r = train_unconditional(&dataset, &c, &self.schedule()?, &mut net, &tc)?;
            (r, PRIOR_CHECKPOINT_FILE)
        } else {
            (
                train(&self.problem()?, &dataset, &mut net, &tc)?,
                CHECKPOINT_FILE,
            )
        };
        let path = self.path(name);
        net.save(&path).map_err(at(&path))?;
        let side = self.sidecar(&path)?;
        let log = self.path(&train_log_file(&self.cfg.training.mode));
        let mut text = format!("# digest {}\nepoch,loss\n", self.digest);
        for (e, l) in report.epoch_losses.iter().enumerate() {
            writeln!(text, "{},{l:e}", e + 1).unwrap();
        }
        self.write(&log, text.as_bytes())?;
        Ok(Outcome {
            artifacts: vec![path, side, log],
            summary: format!(
                "{} training: {} steps, loss {:.4e} -> {:.4e}",
                self.cfg.training.mode,
                report.steps,
                report.epoch_losses.first().copied().unwrap_or(f64::NAN),
                report.epoch_losses.last().copied().unwrap_or(f64::NAN)
            ),
        })
    }

    fn load_net(&self, name: &str) -> Result<ScoreNetwork> {
        let path = self.path(name);
        ScoreNetwork::load(&path).map_err(at(&path))
    }

    fn sample(&self) -> Result<Outcome> {
        let s = &self.cfg.sampling;
        let method: Method = s.method.parse()?;
        let grid = self.grid()?;
        let problem = self.problem()?;
        let data_path = self.path(DATA_FILE);
        let y = read_data_vector_file(&data_path).map_err(at(&data_path))?;
        let seed = self.cfg.seed;
        let mut ens: SampleEnsemble = match method {
            Method::Ucos | Method::UcosReg => {
                let net = self.load_net(CHECKPOINT_FILE)?;
                let den = NetworkDenoiser {
                    net: &net,
                    kappa: problem.kappa()?,
                };
                let (alpha, prior) = if method == Method::UcosReg {
                    (s.alpha, Some(self.prior(&grid)?))
                } else {
                    (0.0, None)
                };
                if method == Method::UcosReg && !(alpha > 0.0 && alpha < 1.0) {
                    return Err(PipelineError::Config(format!(
                        "sampling.alpha must lie in (0, 1) for ucos-reg, got {alpha}"
                    )));
                }
                sample_posterior(
                    &problem,
                    Some(&den),
                    prior.as_ref(),
                    &y,
                    alpha,
                    s.samples,
                    seed,
                )?
            }
            Method::Gaussian => {
                let prior = self.prior(&grid)?;
                sample_posterior(&problem, None, Some(&prior), &y, 1.0, s.samples, seed)?
            }
            Method::Dps => {
                let net = self.load_net(PRIOR_CHECKPOINT_FILE)?;
                let cfg = DpsConfig {
                    rho: self.cfg.dps.rho,
                    normalize_by_residual: self.cfg.dps.normalize,
                };
                sample_dps(&problem, &net, &y, &cfg, s.samples, seed)?.ensemble
            }
        };
        if ens.is_empty() {
            let first = ens
                .failures
                .first()
                .map(|f| f.message.clone())
                .unwrap_or_default();
            return Err(ucos_core::Error::Numerical(format!("every chain failed: {first}")).into());
        }
        ens.method = method;
        ens.digest = self.cfg.digest();
        let path = self.path(&ensemble_file(method));
        ens.save(&path).map_err(at(&path))?;
        let mut summary = format!("{} samples with {method}", ens.len());
        for f in &ens.failures {
            write!(summary, "\nchain {} failed: {}", f.index, f.message).unwrap();
        }
        Ok(Outcome {
            artifacts: vec![path],
            summary,
        })
    }

    fn stats(
        &self,
        ensembles: &[PathBuf],
        truth: Option<&Path>,
        physical: bool,
    ) -> Result<Outcome> {
        let first_path = ensembles
            .first()
            .ok_or_else(|| PipelineError::Config("stats needs at least one --ensemble".into()))?;
        let mut pooled = SampleEnsemble::load(first_path).map_err(at(first_path))?;
        for p in &ensembles[1..] {
            let e = SampleEnsemble::load(p).map_err(at(p))?;
            if e.digest != pooled.digest {
                return Err(PipelineError::Config(format!(
                    "{} was produced under config digest {}, {} under {}",
                    p.display(),
                    hex::encode(e.digest),
                    first_path.display(),
                    hex::encode(pooled.digest)
                )));
            }
            if e.shape != pooled.shape {
                return Err(PipelineError::Config(format!(
                    "{} holds {} samples, expected {}",
                    p.display(),
                    e.shape,
                    pooled.shape
                )));
            }
            pooled.samples.extend(e.samples);
            pooled.failures.extend(e.failures);
        }
        let truth_field = match truth {
            Some(p) => {
                let fields = read_dataset(p).map_err(at(p))?;
                Some(fields.into_iter().next().ok_or_else(|| {
                    PipelineError::Config(format!("{} contains no field", p.display()))
                })?)
            }
            None => None,
        };
        let st = ensemble_stats(&pooled.samples, truth_field.as_ref())?;
        let digest = hex::encode(pooled.digest);
        let method = pooled.method;
        let dir = self.path(&stats_dir(method));
        std::fs::create_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;
        let units = if physical { "mm^-1" } else { "rescaled" };

        let mut fields = vec![
            ("mean", &st.mean, Quantity::Value),
            ("std", &st.std, Quantity::Spread),
        ];
        if let Some(b) = &st.bias {
            fields.push(("bias", b, Quantity::Spread));
        }
        let mut artifacts = Vec::new();
        for (name, field, quantity) in fields {
            let f = if physical {
                export::to_physical(field, quantity)
            } else {
                field.clone()
            };
            for (c, channel) in CHANNEL_NAMES.iter().enumerate().take(f.shape().channels) {
                let comments = vec![
                    format!("digest {digest}"),
                    format!("method {method} samples {} statistic {name} channel {channel} units {units}", pooled.len()),
                ];
                let stem = format!("{name}_{channel}");
                let csv_path = dir.join(format!("{stem}.csv"));
                self.write(&csv_path, export::csv(&f, c, &comments).as_bytes())?;
                let pgm_path = dir.join(format!("{stem}.pgm"));
                self.write(&pgm_path, &export::pgm16(&f, c, &comments))?;
                artifacts.push(csv_path);
                artifacts.push(pgm_path);
            }
        }

        let mut summary = format!(
            "digest {digest}\nmethod {method}\nsamples {}\nfailed_chains {}\n",
            pooled.len(),
            pooled.failures.len()
        );
        let mean_std: f64 = st.std.as_slice().iter().sum::<f64>() / st.std.len() as f64;
        writeln!(summary, "mean_std {mean_std:e}").unwrap();
        if let (Some(t), Some(b)) = (&truth_field, &st.bias) {
            let rmse = (b.as_slice().iter().map(|v| v * v).sum::<f64>() / b.len() as f64).sqrt();
            writeln!(summary, "rmse_of_mean {rmse:e}").unwrap();
            if let Some(v) = outside_support_std(&st.std, t) {
                writeln!(summary, "outside_support_std {v:e}").unwrap();
            }
        }
        let path = dir.join("summary.txt");
        self.write(&path, summary.as_bytes())?;
        artifacts.push(path);
        Ok(Outcome { artifacts, summary })
    }

    fn verify(&self) -> Result<Outcome> {
        let seed = self.cfg.stage_seed("verify");
        let checks = [
            (
                "gaussian-ucos-consistency",
                verify_gaussian_consistency(seed)?,
            ),
            ("mixture-rate", verify_mixture_rate()),
            ("jacobian-fd", verify_jacobian_fd()?),
        ];
        let mut report = format!("# digest {}\n", self.digest);
        let mut failed = Vec::new();
        for (name, (ok, detail)) in &checks {
            writeln!(
                report,
                "{} {name}: {detail}",
                if *ok { "PASS" } else { "FAIL" }
            )
            .unwrap();
            if !ok {
                failed.push(*name);
            }
        }
        let path = self.path(VERIFY_FILE);
        self.write(&path, report.as_bytes())?;
        if !failed.is_empty() {
            return Err(PipelineError::Verification(failed.join(", ")));
        }
        Ok(Outcome {
            artifacts: vec![path],
            summary: report,
        })
    }
}

/// Mean pixelwise standard deviation over pixels where `truth` vanishes in
/// every channel, averaged over channels.
pub fn outside_support_std(std: &Field, truth: &Field) -> Option<f64> {
    let shape = truth.shape();
    let pixels = shape.pixels();
    let outside: Vec<usize> = (0..pixels)
        .filter(|&p| (0..shape.channels).all(|c| truth.as_slice()[c * pixels + p] == 0.0))
        .collect();
    if outside.is_empty() {
        return None;
    }
    let total: f64 = (0..shape.channels)
        .flat_map(|c| outside.iter().map(move |&p| c * pixels + p))
        .map(|k| std.as_slice()[k])
        .sum();
    Some(total / (outside.len() * shape.channels) as f64)
}

/// Conditional score with the closed-form Gaussian denoiser against the
/// diffused analytic posterior score, on random small problems.
pub fn verify_gaussian_consistency(seed: u64) -> Result<(bool, String)> {
    let mut rng = master_rng(seed);
    let mut worst: f64 = 0.0;
    let instances = 20;
    for k in 0..instances {
        let (h, w) = (rng.random_range(1..=4usize), rng.random_range(2..=4usize));
        let grid = PixelGrid::new(h, w, 1.0)?;
        let n = grid.pixels();
        let m = rng.random_range(1..=8usize);
        let entries = standard_normal_vec(&mut rng, m * n);
        let a = DenseMatrixOperator::from_row_major(m, n, &entries)?.with_domain(grid.shape(1))?;
        let c = if k % 2 == 0 {
            CovarianceOperator::identity(n)
        } else {
            ou_covariance(&grid, 0.8, 2.0, 1)?
        };
        let gamma =
            CovarianceOperator::diagonal((0..m).map(|_| rng.random_range(0.05..0.5)).collect())?;
        let prior_mean = Field::from_vec(grid.shape(1), standard_normal_vec(&mut rng, n))?;
        let prior_cov = ou_covariance(&grid, 1.0, 1.5, 1)?;
        let y = standard_normal_vec(&mut rng, m);
        let problem = UcosProblem::new(
            Arc::new(a.clone()),
            c.clone(),
            gamma.clone(),
            DiffusionSchedule::default(),
        )?;
        let post = analytic_posterior(&a, &gamma, &prior_mean, &prior_cov, &y)?;
        let den = GaussianDenoiser::new(&problem, prior_mean.as_slice(), &prior_cov)?;
        let g = problem.data_term(&y)?;
        for t in [0.05, 0.2, 0.5, 0.9] {
            let x = standard_normal_vec(&mut rng, n);
            let lhs = conditional_score(&den, &g, &x, TimePoint::identity(t))?;
            let rhs = gaussian_posterior_score(&post, &c, &x, t)?;
            let num: f64 = lhs
                .iter()
                .zip(&rhs)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            let den: f64 = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
            worst = worst.max(num / den.max(1e-300));
        }
    }
    Ok((
        worst < 1e-6,
        format!("{instances} instances, worst relative error {worst:.2e}"),
    ))
}

/// Error of the convex score combination shrinks linearly in `t`.
pub fn verify_mixture_rate() -> (bool, String) {
    let table = mixture_rate_check(
        Gaussian1d::new(0.0, 1.0),
        Gaussian1d::new(1.0, 2.0),
        0.5,
        0.3,
        &[0.05, 0.1],
    );
    let ratio = table[0].1 / table[1].1;
    (
        (0.4..=0.65).contains(&ratio),
        format!("error(0.05)/error(0.10) = {ratio:.4}"),
    )
}

/// Adjoint Jacobian columns against nonlinear finite differences.
pub fn verify_jacobian_fd() -> Result<(bool, String)> {
    let grid = PixelGrid::square(16, 50.0)?;
    let bg = OpticalField::homogeneous(grid, 0.01, 1.0)?;
    let inst = Instrument::interleaved(50.0, 4, 1.0, 1.0, 1.0, 100e6);
    let j = jacobian(&bg, &inst)?;
    let base = forward_data(&bg, &inst)?;
    let h = 1e-6;
    let zeros = vec![0.0; grid.pixels()];
    let mut worst: f64 = 0.0;
    for pixel in [0, 17, 100, 136, 255] {
        let mut e = zeros.clone();
        e[pixel] = h;
        for channel in 0..2 {
            let (pert, mat) = if channel == 0 {
                (bg.perturbed(&e, &zeros)?, j.mua.matrix())
            } else {
                (bg.perturbed(&zeros, &e)?, j.mus.matrix())
            };
            let fd = forward_data(&pert, &inst)?.difference(&base)?;
            let col = mat.column(pixel);
            let err: f64 = fd
                .iter()
                .zip(col.iter())
                .map(|(a, b)| (a / h - b).powi(2))
                .sum::<f64>()
                .sqrt();
            worst = worst.max(err / col.norm());
        }
    }
    Ok((
        worst < 1e-3,
        format!("worst relative column error {worst:.2e}"),
    ))
}
