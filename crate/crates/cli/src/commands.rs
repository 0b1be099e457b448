use std::path::{Path, PathBuf};

use greenkit::config::Config;
use greenkit::experiments::{
    default_space, fast_solve, helmholtz_budget, hybrid_study, krylov_table, multigrid_study, schwarz_row, spectrum_study,
    table_meshes, KrylovStudy,
};
use greenkit::green::{sidecar_path, train, write_loss_log, GreenSurrogate, TrainConfig};
use greenkit::kernel::{ExactKernel, Kernel};
use greenkit::problems::{mesh_unit_disc, problem, Domain, ProblemId};
use greenkit::spectral::{ElementKind, FeSpace};
use log::info;

use crate::manifest::{model_ref, RunManifest};
use crate::output::{num, opt, opt_int, parse_h, parse_h_list, write_rows};
use crate::{Cli, CliError, Command};

struct LoadedKernel {
    kernel: Box<dyn Kernel>,
    problem: ProblemId,
    path: Option<PathBuf>,
}

fn parse_problem(s: Option<&str>) -> Result<Option<ProblemId>, CliError> {
    s.map(|s| ProblemId::parse(s).map_err(|e| CliError::Usage(e.to_string()))).transpose()
}

fn load_kernel(model: &str, problem: Option<ProblemId>) -> Result<LoadedKernel, CliError> {
    if model == "exact" {
        let id = problem.unwrap_or(ProblemId::Poisson1d);
        let kernel: Box<dyn Kernel> = match id {
            ProblemId::Poisson1d => Box::new(ExactKernel::Poisson1d),
            ProblemId::PoissonDisc => Box::new(ExactKernel::Disc2d),
            ProblemId::Helmholtz1d => {
                return Err(CliError::Usage("helmholtz1d has no closed-form kernel; pass --model <file>".into()))
            }
        };
        return Ok(LoadedKernel { kernel, problem: id, path: None });
    }
    let path = PathBuf::from(model);
    let s = GreenSurrogate::load(&path)?;
    if let Some(id) = problem {
        if id != s.problem {
            return Err(CliError::Usage(format!("model was trained for {} not {}", s.problem.as_str(), id.as_str())));
        }
    }
    Ok(LoadedKernel { problem: s.problem, kernel: Box::new(s), path: Some(path) })
}

fn prepare(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn attach_model(m: &mut RunManifest, k: &LoadedKernel) -> Result<(), CliError> {
    if let Some(p) = &k.path {
        m.model = Some(model_ref(p)?);
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let dir = cli.out_dir.as_path();
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::Train { config, epochs } => cmd_train(cli, config, *epochs),
        Command::Table { id, model, h, full, eig_limit } => {
            cmd_table(dir, seed, cli.threads, id, model, h.as_deref(), *full, *eig_limit)
        }
        Command::Hybrid { model, config, problem, h, periods, maxiter, tol, no_modes } => {
            let mut o = HybridOptions::default();
            if let Some(p) = config {
                o.apply_config(&Config::load(p)?)?;
            }
            if let Some(p) = problem {
                o.problem = Some(p.clone());
            }
            if let Some(h) = h {
                o.h = parse_h(h)?;
            }
            if let Some(p) = periods {
                o.periods = parse_periods(p)?;
            }
            if let Some(m) = maxiter {
                o.maxiter = *m;
            }
            if let Some(t) = tol {
                o.tol = *t;
            }
            o.modes &= !no_modes;
            cmd_hybrid(dir, seed, cli.threads, model, &o)
        }
        Command::Spectrum { model, problem, count, h } => cmd_spectrum(dir, seed, cli.threads, model, problem.as_deref(), *count, h.as_deref()),
        Command::Solve { model, problem, h } => cmd_solve(dir, seed, cli.threads, model, problem.as_deref(), h),
        Command::Multigrid { model, problem, levels, cycles, tol } => {
            cmd_multigrid(dir, seed, cli.threads, model.as_deref(), problem.as_deref(), levels, *cycles, *tol)
        }
    }
}

fn cmd_train(cli: &Cli, config: &Path, epochs: Option<usize>) -> Result<(), CliError> {
    let cfg = Config::load(config)?;
    let mut tc = TrainConfig::from_config(&cfg)?;
    if let Some(s) = cli.seed {
        tc.seed = s;
    }
    if let Some(e) = epochs {
        tc.epochs = e;
        tc.milestones.retain(|m| *m < e);
    }
    tc.validate()?;
    let dir = cli.out_dir.as_path();
    prepare(dir)?;
    let canonical = tc.to_config_string();
    let mut man = RunManifest::new("train", &canonical, tc.seed, cli.threads);
    info!("training {} for {} epochs", tc.problem.as_str(), tc.epochs);
    let (model, log) = train(&problem(tc.problem), &tc)?;
    let model_path = dir.join("model.json");
    model.save(&model_path)?;
    let loss_path = dir.join("loss.csv");
    write_loss_log(&log, tc.log_every, std::fs::File::create(&loss_path)?)?;
    let cfg_path = dir.join("config.txt");
    std::fs::write(&cfg_path, &canonical)?;
    let last = log.last().map(|r| r.parts.total).unwrap_or(f64::NAN);
    println!("final loss {}", num(last));
    man.model = Some(model_ref(&model_path)?);
    man.outputs = vec![model_path.clone(), sidecar_path(&model_path), loss_path, cfg_path];
    man.record("final_loss", last);
    man.record("epochs", tc.epochs);
    man.finish(dir)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_table(
    dir: &Path,
    seed: u64,
    threads: usize,
    id: &str,
    model: &str,
    h: Option<&str>,
    full: bool,
    eig_limit: Option<usize>,
) -> Result<(), CliError> {
    let pid = match id {
        "1" | "2" => ProblemId::Poisson1d,
        "4" => ProblemId::Helmholtz1d,
        "5" => ProblemId::PoissonDisc,
        _ => return Err(CliError::Usage(format!("unknown table `{id}` (expected 1, 2, 4 or 5)"))),
    };
    let k = load_kernel(model, Some(pid))?;
    prepare(dir)?;
    let text = format!("table={id}\nmodel={model}\nh={}\nfull={full}\neig_limit={eig_limit:?}\n", h.unwrap_or(""));
    let mut man = RunManifest::new("table", &text, seed, threads);
    attach_model(&mut man, &k)?;
    let path = dir.join(format!("table{id}.csv"));
    if id == "2" {
        let cases: Vec<(f64, f64)> = match h {
            Some(list) => {
                let v = parse_h_list(list)?;
                if v.len() != 2 {
                    return Err(CliError::Usage("table 2 takes --h <fine>,<coarse>".into()));
                }
                vec![(v[0], v[1])]
            }
            None if full => vec![(0.5f64.powi(16), 0.5f64.powi(10))],
            None => vec![(0.5f64.powi(14), 0.5f64.powi(9))],
        };
        let mut rows = Vec::new();
        for (fine, coarse) in cases {
            let r = schwarz_row(k.kernel.as_ref(), pid, fine, coarse, 30, 1e-8)?;
            println!("h = {fine:e}, H = {coarse:e}: kappa {:.3}, {} iterations, error {:.3e}", r.kappa, r.iters, r.err);
            rows.push(vec![
                num(r.h),
                num(r.coarse_h),
                r.overlap.to_string(),
                r.n.to_string(),
                r.subdomains.to_string(),
                num(r.kappa),
                r.iters.to_string(),
                num(r.err),
            ]);
        }
        write_rows(&path, &["h", "coarse_h", "overlap", "n", "subdomains", "kappa_ba", "iters_bicg", "err_l2"], &rows)?;
        man.record("rows", rows.len());
    } else {
        let hs = match h {
            Some(list) => parse_h_list(list)?,
            None => table_meshes(pid),
        };
        let mut study = KrylovStudy::for_problem(pid);
        if let Some(l) = eig_limit {
            study.eig_limit = l;
        }
        let budget = |h: f64| if pid == ProblemId::Helmholtz1d { helmholtz_budget(h) } else { None };
        let rows = krylov_table(k.kernel.as_ref(), pid, &hs, &study, &budget)?;
        let out: Vec<Vec<String>> = rows
            .iter()
            .map(|r| {
                println!(
                    "h = {:e}: n {}, kappa(A) {}, kappa(BA) {}, base {} its ({:.2e}), preconditioned {} its ({:.2e})",
                    r.h,
                    r.n,
                    r.kappa_a.map_or("-".into(), |v| format!("{v:.3e}")),
                    r.kappa_prec.map_or("-".into(), |v| format!("{v:.3}")),
                    r.iters_base,
                    r.err_base,
                    r.iters_prec,
                    r.err_prec
                );
                vec![
                    num(r.h),
                    r.n.to_string(),
                    opt(r.kappa_a),
                    opt(r.kappa_prec),
                    r.iters_base.to_string(),
                    num(r.err_base),
                    r.iters_prec.to_string(),
                    num(r.err_prec),
                    opt_int(r.iters_tight),
                    opt(r.err_tight),
                ]
            })
            .collect();
        write_rows(
            &path,
            &["h", "n", "kappa_a", "kappa_ba", "iters_base", "err_base", "iters_prec", "err_prec", "iters_to_target", "err_at_target"],
            &out,
        )?;
        man.record("rows", out.len());
    }
    man.outputs.push(path);
    man.finish(dir)?;
    Ok(())
}

#[derive(Debug, Clone)]
struct HybridOptions {
    problem: Option<String>,
    h: f64,
    periods: Vec<usize>,
    maxiter: usize,
    tol: f64,
    modes: bool,
}

impl Default for HybridOptions {
    fn default() -> Self {
        Self { problem: None, h: 0.5f64.powi(8), periods: vec![2, 4, 8, 16], maxiter: 200, tol: 1e-12, modes: true }
    }
}

fn parse_periods(s: &str) -> Result<Vec<usize>, CliError> {
    let v = Config::parse_list::<usize>(s)?;
    if v.is_empty() || v.contains(&0) {
        return Err(CliError::Usage("periods must be positive".into()));
    }
    Ok(v)
}

impl HybridOptions {
    fn apply_config(&mut self, c: &Config) -> Result<(), CliError> {
        if let Some(p) = c.get("hybrid", "problem") {
            self.problem = Some(p.to_string());
        }
        if let Some(h) = c.get("hybrid", "h") {
            self.h = parse_h(h)?;
        }
        if let Some(p) = c.get("hybrid", "periods") {
            self.periods = parse_periods(p)?;
        }
        self.maxiter = c.parse_or("hybrid", "maxiter", self.maxiter)?;
        self.tol = c.parse_or("hybrid", "tol", self.tol)?;
        self.modes = c.parse_or("hybrid", "modes", self.modes)?;
        Ok(())
    }

    fn digest_text(&self, model: &str) -> String {
        format!(
            "model={model}\nproblem={:?}\nh={:e}\nperiods={:?}\nmaxiter={}\ntol={:e}\nmodes={}\n",
            self.problem, self.h, self.periods, self.maxiter, self.tol, self.modes
        )
    }
}

fn cmd_hybrid(dir: &Path, seed: u64, threads: usize, model: &str, o: &HybridOptions) -> Result<(), CliError> {
    let k = load_kernel(model, parse_problem(o.problem.as_deref())?)?;
    if problem(k.problem).domain != Domain::UnitInterval {
        return Err(CliError::Usage("the hybrid study runs on 1D problems".into()));
    }
    prepare(dir)?;
    let mut man = RunManifest::new("hybrid", &o.digest_text(model), seed, threads);
    attach_model(&mut man, &k)?;
    let st = hybrid_study(k.kernel.as_ref(), k.problem, o.h, &o.periods, o.maxiter, o.tol, o.modes)?;
    let mut runs = vec![("jacobi".to_string(), None, &st.jacobi)];
    for (p, t) in &st.hybrid {
        runs.push((format!("hybrid_k{p}"), Some(*p), t));
    }
    let mut summary = Vec::new();
    let mut neural = serde_json::Map::new();
    for (name, period, t) in &runs {
        let path = dir.join(format!("{name}.csv"));
        t.write_csv(std::fs::File::create(&path)?)?;
        man.outputs.push(path);
        let radius = period.and_then(|p| st.radius.iter().find(|(q, _)| *q == p).and_then(|(_, r)| *r));
        let below = t.first_error_below(o.tol);
        println!(
            "{name}: {} iterations, converged {}, final error {:.3e}, neural applications {}",
            t.iterations,
            t.converged,
            t.final_error().unwrap_or(f64::NAN),
            t.neural_applications
        );
        neural.insert(name.clone(), t.neural_applications.into());
        summary.push(vec![
            name.clone(),
            opt_int(*period),
            t.iterations.to_string(),
            t.converged.to_string(),
            opt(t.final_error()),
            opt_int(below),
            t.neural_applications.to_string(),
            opt(radius),
        ]);
    }
    let path = dir.join("summary.csv");
    write_rows(
        &path,
        &["run", "period", "iterations", "converged", "final_error", "iters_to_tol", "neural_applications", "radius"],
        &summary,
    )?;
    man.outputs.push(path);
    man.record("neural_applications", serde_json::Value::Object(neural));
    man.record("jacobi_converged", st.jacobi.converged);
    man.finish(dir)?;
    Ok(())
}

fn cmd_spectrum(
    dir: &Path,
    seed: u64,
    threads: usize,
    model: &str,
    problem_name: Option<&str>,
    count: Option<usize>,
    h: Option<&str>,
) -> Result<(), CliError> {
    let k = load_kernel(model, parse_problem(problem_name)?)?;
    let domain = problem(k.problem).domain;
    let space = match h {
        None => default_space(k.problem)?,
        Some(h) => {
            let h = parse_h(h)?;
            match domain {
                Domain::UnitInterval => FeSpace::interval(h, ElementKind::Quadratic)?,
                Domain::UnitDisc => FeSpace::disc_linear(&mesh_unit_disc(h)?),
            }
        }
    };
    let count = count.unwrap_or(if domain == Domain::UnitDisc { 300 } else { 200 });
    if count == 0 || count > space.ndof {
        return Err(CliError::Usage(format!("count must lie in 1..={}", space.ndof)));
    }
    prepare(dir)?;
    let mut man = RunManifest::new("spectrum", &format!("model={model}\nh={:e}\ncount={count}\n", space.h), seed, threads);
    attach_model(&mut man, &k)?;
    let (rep, prof) = spectrum_study(k.kernel.as_ref(), k.problem, &space, count)?;
    let path = dir.join("spectrum.csv");
    match &prof {
        Some(p) => {
            p.write_csv(std::fs::File::create(&path)?)?;
            let hi = if domain == Domain::UnitDisc { (250, 300) } else { (150, 200) };
            let low = p.median_delta_mu(1, 10);
            let high = p.median_delta_mu(hi.0, hi.1.min(count));
            println!("median delta_mu: modes 1-10 {}, modes {}-{} {}", opt(low), hi.0, hi.1, opt(high));
            if let Some(v) = low {
                man.record("median_delta_mu_low", v);
            }
            if let Some(v) = high {
                man.record("median_delta_mu_high", v);
            }
        }
        None => {
            let rows: Vec<Vec<String>> = rep.eigenvalues.iter().enumerate().map(|(j, m)| vec![(j + 1).to_string(), num(*m)]).collect();
            write_rows(&path, &["j", "mu_approx"], &rows)?;
        }
    }
    man.record("eigenpairs", rep.eigenvalues.len());
    man.record("negative_eigenvalues", rep.negative_count);
    man.outputs.push(path);
    man.finish(dir)?;
    Ok(())
}

fn cmd_solve(dir: &Path, seed: u64, threads: usize, model: &str, problem_name: Option<&str>, h: &str) -> Result<(), CliError> {
    let k = load_kernel(model, parse_problem(problem_name)?)?;
    let h = parse_h(h)?;
    prepare(dir)?;
    let mut man = RunManifest::new("solve", &format!("model={model}\nh={h:e}\n"), seed, threads);
    attach_model(&mut man, &k)?;
    let fs = fast_solve(k.kernel.as_ref(), k.problem, h, &[])?;
    let d = problem(k.problem).dim();
    let mut header: Vec<&str> = if d == 1 { vec!["x"] } else { vec!["x", "y"] };
    header.extend(["u_approx", "u_exact", "abs_error"]);
    let rows: Vec<Vec<String>> = fs
        .points
        .chunks(d)
        .enumerate()
        .map(|(i, x)| {
            let mut r: Vec<String> = x.iter().map(|v| num(*v)).collect();
            let e = fs.exact.as_ref().map(|e| e[i]);
            r.push(num(fs.approx[i]));
            r.push(opt(e));
            r.push(opt(e.map(|e| (e - fs.approx[i]).abs())));
            r
        })
        .collect();
    let path = dir.join("solution.csv");
    write_rows(&path, &header, &rows)?;
    if let Some(e) = fs.max_error {
        println!("max abs error {e:.3e} over {} points", rows.len());
        man.record("max_error", e);
    }
    man.outputs.push(path);
    man.finish(dir)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_multigrid(
    dir: &Path,
    seed: u64,
    threads: usize,
    model: Option<&str>,
    problem_name: Option<&str>,
    levels: &str,
    cycles: usize,
    tol: f64,
) -> Result<(), CliError> {
    let pid = parse_problem(problem_name)?;
    let loaded = model.map(|m| load_kernel(m, pid)).transpose()?;
    let id = loaded.as_ref().map(|k| k.problem).or(pid).unwrap_or(ProblemId::Poisson1d);
    if problem(id).domain != Domain::UnitInterval {
        return Err(CliError::Usage("multigrid runs on 1D problems".into()));
    }
    let hs = parse_h_list(levels)?;
    if hs.windows(2).any(|w| w[0] >= w[1]) {
        return Err(CliError::Usage("levels must be listed finest first".into()));
    }
    prepare(dir)?;
    let text = format!("model={model:?}\nproblem={}\nlevels={levels}\ncycles={cycles}\ntol={tol:e}\n", id.as_str());
    let mut man = RunManifest::new("multigrid", &text, seed, threads);
    if let Some(k) = &loaded {
        attach_model(&mut man, k)?;
    }
    let (t, diagram) = multigrid_study(loaded.as_ref().map(|k| k.kernel.as_ref()), id, &hs, cycles, tol)?;
    println!("{diagram}");
    println!("{} cycles, converged {}, final error {:.3e}", t.iterations, t.converged, t.final_error().unwrap_or(f64::NAN));
    let path = dir.join("multigrid.csv");
    t.write_csv(std::fs::File::create(&path)?)?;
    man.outputs.push(path);
    man.record("cycles", t.iterations);
    man.record("converged", t.converged);
    man.record("diagram", diagram);
    man.finish(dir)?;
    Ok(())
}
