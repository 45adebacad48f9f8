//! One function per subcommand. Each returns after writing its artifacts;
//! failures carry the exit code through [`CliError`].

use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use ctrl_core::driver::{
    read_dataset, run_ctrl_lcb, run_ctrl_ucb, write_dataset, write_metrics_csv, BehaviorEstimate, EpsilonMixture,
    OfflineConfig,
};
use ctrl_core::env::{ContinuousMaze, FourRoomGrid, SyntheticConditional, SyntheticFamily};
use ctrl_core::gradcheck::gradient_suite;
use ctrl_core::heatmap::model_heatmap;
use ctrl_core::lowrank::{BaseMeasure, LowRankModel};
use ctrl_core::mdp::{Environment, Policy, TabularMdp};
use ctrl_core::mle::{consistency_experiment, mean_tv_by_k, write_consistency_csv};
use ctrl_core::nce::Objective;
use ctrl_core::planner::{value_iteration, VI_TOL};
use ctrl_core::{derive_seed, rng};
use log::info;
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{
    self, BehaviorName, BehaviorPolicy, ConsistencyFile, EnvKind, EnvSection, FamilyName, GenerateFile, ObjectiveName,
    OfflineFile, OnlineFile,
};
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

/// A loaded config and the directory relative paths resolve against.
pub struct Loaded<T> {
    pub config: T,
    pub base: PathBuf,
}

pub fn load<T: DeserializeOwned>(path: &Path) -> Result<Loaded<T>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let config = config::parse(&text).map_err(|e| match e {
        CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
        e => e,
    })?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Loaded { config, base })
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    let joined = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    std::path::absolute(&joined).unwrap_or(joined)
}

/// Env paths made absolute so the echoed config reruns from anywhere.
fn anchor_env(env: &EnvSection, base: &Path) -> EnvSection {
    EnvSection {
        layout: env.layout.as_deref().map(|p| resolve(base, p)),
        mdp: env.mdp.as_deref().map(|p| resolve(base, p)),
        ..env.clone()
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `config.toml` (the resolved, rerunnable config) and
/// `manifest.toml` describing the run.
fn write_provenance<T: Serialize>(dir: &Path, command: &str, seed: u64, config: &T) -> Result<()> {
    let text = config::render(config)?;
    write(&dir.join("config.toml"), text.as_bytes())?;
    let manifest = format!(
        "command = \"{command}\"\nseed = {seed}\nconfig = \"config.toml\"\nconfig_sha256 = \"{}\"\nctrl_version = \"{}\"\n",
        sha256_hex(text.as_bytes()),
        env!("CARGO_PKG_VERSION"),
    );
    write(&dir.join("manifest.toml"), manifest.as_bytes())
}

/// Environment selected by an `[env]` section.
pub enum Env {
    Grid(FourRoomGrid),
    Maze(ContinuousMaze),
    Tabular(TabularMdp),
}

impl Env {
    pub fn build(section: &EnvSection, base: &Path) -> Result<Self> {
        let need = |p: &Option<PathBuf>, key: &str| {
            p.as_ref().map(|p| resolve(base, p)).ok_or_else(|| CliError::Config(format!("env.{key} is required for this env kind")))
        };
        Ok(match section.kind {
            EnvKind::Grid => match &section.layout {
                Some(p) => {
                    let p = resolve(base, p);
                    let text = fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?;
                    Env::Grid(FourRoomGrid::from_ascii(&text, section.reward.into(), section.slip)?)
                }
                None => {
                    if !(0.0..=1.0).contains(&section.slip) {
                        return Err(CliError::Config("env.slip must lie in [0, 1]".into()));
                    }
                    Env::Grid(FourRoomGrid::four_rooms(section.reward.into(), section.slip))
                }
            },
            EnvKind::Maze => {
                let mut m = ContinuousMaze::four_rooms(section.reward.into());
                m.random_start = section.random_start;
                Env::Maze(m)
            }
            EnvKind::Tabular => {
                let p = need(&section.mdp, "mdp")?;
                let text = fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?;
                Env::Tabular(TabularMdp::parse(&text)?)
            }
        })
    }

    pub fn as_dyn(&self) -> &dyn Environment {
        match self {
            Env::Grid(g) => g,
            Env::Maze(m) => m,
            Env::Tabular(t) => t,
        }
    }

    /// Exact tabular form, for discrete environments.
    pub fn tabular(&self) -> Result<TabularMdp> {
        match self {
            Env::Grid(g) => Ok(g.to_tabular()),
            Env::Tabular(t) => Ok(t.clone()),
            Env::Maze(_) => Err(CliError::Config("the maze has no tabular form".into())),
        }
    }
}

fn fresh_model(env: &Env, model: &config::ModelSection, seed: u64) -> Result<LowRankModel> {
    if model.true_model {
        return Ok(LowRankModel::tabular(&env.tabular()?)?);
    }
    let e = env.as_dyn();
    let space = e.state_space().clone();
    Ok(LowRankModel::new(
        space.clone(),
        e.action_space().clone(),
        BaseMeasure::uniform(&space),
        &model.to_core(),
        &mut rng(derive_seed(seed, 0)),
    )?)
}

/// Policy as text: probability rows for discrete states, otherwise the
/// feature-softmax weights.
pub fn policy_text(policy: &Policy, n_states: Option<usize>) -> Result<String> {
    let mut out = String::new();
    match (policy, n_states) {
        (Policy::FeatureSoftmax { n_actions, weights, temperature }, _) => {
            out.push_str(&format!("feature_softmax\nn_actions {n_actions}\ntemperature {temperature:.16e}\nweights"));
            for w in weights {
                out.push_str(&format!(" {w:.16e}"));
            }
            out.push('\n');
        }
        (_, Some(ns)) => {
            let na = policy.n_actions();
            let table = policy.table(ns)?;
            out.push_str(&format!("tabular\nn_states {ns}\nn_actions {na}\n"));
            for row in table.chunks(na) {
                let cells: Vec<String> = row.iter().map(|p| format!("{p:.16e}")).collect();
                out.push_str(&cells.join(" "));
                out.push('\n');
            }
        }
        (Policy::Uniform { n_actions }, None) => out.push_str(&format!("uniform\nn_actions {n_actions}\n")),
        _ => return Err(CliError::Config("tabular policy over a continuous state space".into())),
    }
    Ok(out)
}

/// `(seed, output dir)` per run: the config's own seed, or one
/// `seed-<k>` subdirectory per seed of `--seeds`.
fn runs(seed: u64, seeds: Option<&[u64]>, out: &Path) -> Vec<(u64, PathBuf)> {
    match seeds {
        None => vec![(seed, out.to_path_buf())],
        Some(seeds) => seeds.iter().map(|&s| (s, out.join(format!("seed-{s}")))).collect(),
    }
}

/// `ctrl online CONFIG`
pub fn online(path: &Path, seeds: Option<&[u64]>) -> Result<()> {
    let Loaded { config, base } = load::<OnlineFile>(path)?;
    let out = resolve(&base, &config.output_dir);
    for (seed, dir) in runs(config.seed, seeds, &out) {
        let c = OnlineFile { seed, output_dir: dir.clone(), env: anchor_env(&config.env, &base), ..config.clone() };
        online_run(&c, &base, &dir)?;
    }
    Ok(())
}

pub fn online_run(c: &OnlineFile, base: &Path, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    write_provenance(dir, "online", c.seed, c)?;
    let env = Env::build(&c.env, base)?;
    let model = fresh_model(&env, &c.model, c.seed)?;
    let mut metrics = vec![];
    let result = run_ctrl_ucb(env.as_dyn(), &c.to_core(), model, &c.nce.to_core(), &mut metrics);
    // the trace is flushed even when the run aborts
    let mut csv = vec![];
    write_metrics_csv(&metrics, &mut csv)?;
    write(&dir.join("metrics.csv"), &csv)?;
    let outcome = result?;
    write(&dir.join("model.bin"), &outcome.model.to_bytes())?;
    let ns = env.as_dyn().state_space().cardinality();
    write(&dir.join("policy.txt"), policy_text(&outcome.policy, ns)?.as_bytes())?;
    info!("online run finished: {} epochs -> {}", metrics.len(), dir.display());
    Ok(())
}

/// `ctrl offline CONFIG`
pub fn offline(path: &Path, seeds: Option<&[u64]>) -> Result<()> {
    let Loaded { config, base } = load::<OfflineFile>(path)?;
    let out = resolve(&base, &config.output_dir);
    for (seed, dir) in runs(config.seed, seeds, &out) {
        let c = OfflineFile {
            seed,
            output_dir: dir.clone(),
            dataset: resolve(&base, &config.dataset),
            env: config.env.as_ref().map(|e| anchor_env(e, &base)),
            ..config.clone()
        };
        offline_run(&c, &base, &dir)?;
    }
    Ok(())
}

pub fn offline_run(c: &OfflineFile, base: &Path, dir: &Path) -> Result<()> {
    let data_path = resolve(base, &c.dataset);
    let file = fs::File::open(&data_path).map_err(|e| CliError::io(&data_path, e))?;
    let dataset = read_dataset(BufReader::new(file)).map_err(|e| match e {
        ctrl_core::Error::Io(io) => CliError::io(&data_path, io),
        e => CliError::Io { path: data_path.display().to_string(), source: std::io::Error::other(e.to_string()) },
    })?;
    create_dir(dir)?;
    write_provenance(dir, "offline", c.seed, c)?;
    let model = if c.model.true_model {
        let env = c.env.as_ref().ok_or_else(|| CliError::Config("model.true_model needs an [env] section".into()))?;
        LowRankModel::tabular(&Env::build(env, base)?.tabular()?)?
    } else {
        let space = dataset.states.clone();
        LowRankModel::new(
            space.clone(),
            dataset.actions.clone(),
            BaseMeasure::uniform(&space),
            &c.model.to_core(),
            &mut rng(derive_seed(c.seed, 0)),
        )?
    };
    let na = dataset.actions.cardinality().ok_or_else(|| CliError::Config("dataset actions must be discrete".into()))?;
    let o = &c.offline;
    let cfg = OfflineConfig {
        dataset: dataset.transitions,
        alpha: o.alpha,
        lambda: o.lambda,
        gamma: o.gamma,
        behavior: match o.behavior {
            BehaviorName::Counts => BehaviorEstimate::Counts,
            BehaviorName::Uniform => BehaviorEstimate::Provided(Policy::uniform(na)),
        },
        reg_weight: o.reg_weight,
        repr_steps: o.repr_steps,
        model_learning_rate: o.model_learning_rate,
        policy_steps: o.policy_steps,
        policy_learning_rate: o.policy_learning_rate,
        planner: c.planner.to_core(),
        coverage_ridge: o.coverage_ridge,
        seed: c.seed,
    };
    let out = run_ctrl_lcb(&cfg, model, &c.nce.to_core())?;
    write(&dir.join("metrics.csv"), out.metrics.to_csv().as_bytes())?;
    write(&dir.join("coverage.txt"), out.coverage.to_text().as_bytes())?;
    write(&dir.join("model.bin"), &out.model.to_bytes())?;
    write(&dir.join("policy.txt"), policy_text(&out.policy, dataset.states.cardinality())?.as_bytes())?;
    info!("offline run finished: c_pi_star = {:.6}", out.coverage.c_pi_star);
    Ok(())
}

/// `ctrl heatmap`: density grid of a checkpoint at `(state, action)`.
pub fn heatmap(model_path: &Path, state: &str, action: &str, resolution: (usize, usize), seed: u64, out: &Path) -> Result<()> {
    let bytes = fs::read(model_path).map_err(|e| CliError::io(model_path, e))?;
    let model = LowRankModel::from_bytes(&bytes).map_err(|e| CliError::Io {
        path: model_path.display().to_string(),
        source: std::io::Error::other(e.to_string()),
    })?;
    let s = model.state_space.parse_point(state).map_err(|e| CliError::Config(format!("--state: {e}")))?;
    let a = model.action_space.parse_point(action).map_err(|e| CliError::Config(format!("--action: {e}")))?;
    let grid = model_heatmap(&model, &s, &a, resolution, &mut rng(seed))?;
    create_dir(out)?;
    let mut csv = vec![];
    grid.write_csv(&mut csv)?;
    write(&out.join("heatmap.csv"), &csv)?;
    let mut meta = format!("model = {:?}\nstate = {:?}\naction = {:?}\nseed = {seed}\n", model_path.display().to_string(), state, action);
    meta.push_str(&grid.metadata());
    write(&out.join("heatmap.toml"), meta.as_bytes())
}

/// Outcome of a consistency sweep.
#[derive(Debug, PartialEq)]
pub enum Verdict {
    Pass,
    /// Binary NCE on a varying-partition family failed, as predicted.
    InconsistencyWitnessed,
    Fail,
}

/// `ctrl consistency CONFIG`
pub fn consistency(path: &Path) -> Result<Verdict> {
    let Loaded { config, base } = load::<ConsistencyFile>(path)?;
    let c = &config.consistency;
    let env = match c.family {
        FamilyName::Free => SyntheticConditional::random_free(c.x_cardinality, c.u_cardinality, &mut rng(c.family_seed))?,
        FamilyName::Constant => {
            let free = SyntheticConditional::random_free(c.x_cardinality, c.u_cardinality, &mut rng(c.family_seed))?;
            SyntheticConditional::new(free.true_table, SyntheticFamily::ConstantPartition)?
        }
        FamilyName::Varying => SyntheticConditional::varying_partition_witness(),
    };
    let seeds: Vec<u64> = (0..c.seeds).map(|i| derive_seed(config.seed, i)).collect();
    let objective: Objective = c.objective.into();
    let rows = consistency_experiment(&env, c.n, &c.k_list, objective, &seeds)?;
    let dir = resolve(&base, &config.output_dir);
    create_dir(&dir)?;
    write_provenance(&dir, "consistency", config.seed, &ConsistencyFile { output_dir: dir.clone(), ..config.clone() })?;
    let mut csv = vec![];
    write_consistency_csv(&rows, &mut csv)?;
    write(&dir.join("consistency.csv"), &csv)?;
    let tv = mean_tv_by_k(&rows);
    let (first, last) = (tv[0].1, tv[tv.len() - 1].1);
    let ok = last < c.tv_threshold && (tv.len() == 1 || last <= first);
    let verdict = match (ok, c.family, c.objective) {
        (true, _, _) => Verdict::Pass,
        (false, FamilyName::Varying, ObjectiveName::Binary) => Verdict::InconsistencyWitnessed,
        (false, _, _) => Verdict::Fail,
    };
    let mut summary = String::from("K,mean_tv\n");
    for (k, v) in &tv {
        summary.push_str(&format!("{k},{v:.16e}\n"));
    }
    summary.push_str(match verdict {
        Verdict::Pass => "result: pass\n",
        Verdict::InconsistencyWitnessed => "result: expected-fail, inconsistency witnessed\n",
        Verdict::Fail => "result: fail\n",
    });
    write(&dir.join("summary.txt"), summary.as_bytes())?;
    print!("{summary}");
    Ok(verdict)
}

/// `ctrl gen-dataset CONFIG`
pub fn gen_dataset(path: &Path) -> Result<usize> {
    let Loaded { config, base } = load::<GenerateFile>(path)?;
    let env = Env::build(&config.env, &base)?;
    let e = env.as_dyn();
    let g = &config.generate;
    let policy = match g.policy {
        BehaviorPolicy::Uniform => Policy::uniform(e.n_actions()),
        BehaviorPolicy::Optimal => {
            let mdp = env.tabular()?;
            value_iteration(&mdp, &mdp.r, g.gamma, VI_TOL)?.greedy
        }
    };
    if !(0.0..=1.0).contains(&g.epsilon) {
        return Err(CliError::Config("generate.epsilon must lie in [0, 1]".into()));
    }
    let actor = EpsilonMixture { inner: &policy, epsilon: g.epsilon };
    let data = ctrl_core::driver::generate_dataset(e, &actor, g.episodes, g.gamma, &mut rng(config.seed))?;
    let out = resolve(&base, &config.output);
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let file = fs::File::create(&out).map_err(|e| CliError::io(&out, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_dataset(e.state_space(), e.action_space(), &data, &mut w)?;
    w.flush().map_err(|err| CliError::io(&out, err))?;
    info!("wrote {} transitions to {}", data.len(), out.display());
    Ok(data.len())
}

/// `ctrl check-gradients`: prints one line per loss.
pub fn check_gradients(instances: usize, seed: u64) -> Result<()> {
    let results = gradient_suite(instances, seed)?;
    let mut failed = vec![];
    for r in &results {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<22} {:>3} instances  max rel error {:.3e}  {verdict}", r.loss, r.instances, r.max_rel_error);
        if !r.passed() {
            failed.push(r.loss);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!("gradient check failed for {}", failed.join(", "))))
    }
}

/// Parses `NXxNY`, e.g. `100x100`.
pub fn parse_resolution(text: &str) -> Result<(usize, usize)> {
    let bad = || CliError::Config(format!("resolution {text:?} must look like 100x100"));
    let (a, b) = text.split_once('x').ok_or_else(bad)?;
    let nx = a.parse().map_err(|_| bad())?;
    let ny = b.parse().map_err(|_| bad())?;
    if nx == 0 || ny == 0 {
        return Err(bad());
    }
    Ok((nx, ny))
}
