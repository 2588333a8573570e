//! Ground-truth tables on disk: Riccati solutions and double-well grids.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use socm_core::ground_truth::{
    DoubleWellControl, GroundTruth, Hjb1d, HjbGridOptions, LinearOuControl, LqrControl, RiccatiSolution,
};
use socm_core::linalg::Matrix;
use socm_core::problem::{ModelKind, ProblemSpec};

use crate::archive::Archive;
use crate::error::{LabError, Result};

pub const RICCATI_STEPS: usize = 10_000;

/// `<dir>/<setting>-d<dim>-s<problem seed>.truth`.
pub fn cache_file(dir: &Path, spec: &ProblemSpec, problem_seed: u64) -> PathBuf {
    dir.join(format!("{}-d{}-s{}.truth", spec.name(), spec.dim(), problem_seed))
}

fn header(spec: &ProblemSpec, problem_seed: u64, kind: &str) -> Archive {
    let mut a = Archive::default();
    a.set("kind", "ground_truth");
    a.set("truth", kind);
    a.set("setting", spec.name());
    a.set("dim", spec.dim());
    a.set("problem_seed", problem_seed);
    a.set_f64("horizon", spec.horizon());
    a.set_f64("noise_level", spec.noise_level());
    a
}

fn sol_matrix(h: &Hjb1d) -> Matrix {
    Matrix::from_vec(h.nt, h.nx, h.control.clone())
}

/// Solve for the ground truth of `spec` and keep the tables.
pub fn compute(spec: &ProblemSpec, problem_seed: u64) -> Result<(GroundTruth, Archive)> {
    let lambda = spec.noise_level();
    match spec.model().kind() {
        ModelKind::LinearQuadratic(lq) if lq.gamma.iter().all(|&g| g == 0.0) => {
            let c = LqrControl::new(lq, spec.horizon(), lambda, RICCATI_STEPS)?;
            let mut a = header(spec, problem_seed, "lqr");
            let d = spec.dim();
            let rows = c.riccati.f.len();
            let f = Matrix::from_fn(rows, d * d, |k, e| c.riccati.f[k].as_slice()[e]);
            a.push("riccati.f", f);
            a.push("riccati.trace_integral", Matrix::column(&c.riccati.trace_integral));
            a.push("sigma", c.sigma.clone());
            let c = Arc::new(c);
            Ok((
                GroundTruth {
                    control: c.clone(),
                    value: Some(c),
                },
                a,
            ))
        }
        ModelKind::LinearQuadratic(lq) => {
            let c = Arc::new(LinearOuControl::new(lq, spec.horizon())?);
            let mut a = header(spec, problem_seed, "linear_ou");
            let n = 101;
            let table = Matrix::from_fn(n, spec.dim() + 1, |k, j| {
                let t = spec.horizon() * k as f64 / (n - 1) as f64;
                if j == 0 {
                    t
                } else {
                    c.control_at(t)[j - 1]
                }
            });
            a.push("control_table", table);
            Ok((
                GroundTruth {
                    control: c.clone(),
                    value: Some(c),
                },
                a,
            ))
        }
        ModelKind::DoubleWell(_) => {
            if spec.model().diffusion(0.0) != Matrix::identity(spec.dim()) {
                return Err(LabError::Config(
                    "double-well ground truth assumes unit diffusion".into(),
                ));
            }
            let ModelKind::DoubleWell(dw) = spec.model().kind() else {
                unreachable!()
            };
            let opts = HjbGridOptions::default();
            let c = DoubleWellControl::new(dw, spec.horizon(), lambda, opts)?;
            let mut a = header(spec, problem_seed, "double_well");
            a.set_f64("grid.half_width", opts.half_width);
            a.set("grid.nx", opts.nx);
            a.set("grid.nt", opts.nt);
            let mut distinct: Vec<Arc<Hjb1d>> = Vec::new();
            let mut map = Vec::new();
            for s in &c.coords {
                let idx = match distinct.iter().position(|d| Arc::ptr_eq(d, s)) {
                    Some(i) => i,
                    None => {
                        distinct.push(s.clone());
                        distinct.len() - 1
                    }
                };
                map.push(idx as f64);
            }
            a.push("coordinate_solution", Matrix::row_vector(&map));
            for (i, s) in distinct.iter().enumerate() {
                a.push(format!("hjb.{i}.control"), sol_matrix(s));
                a.push(format!("hjb.{i}.phi_terminal"), Matrix::row_vector(&s.phi_terminal));
                a.push(format!("hjb.{i}.phi_initial"), Matrix::row_vector(&s.phi_initial));
            }
            Ok((
                GroundTruth {
                    control: Arc::new(c),
                    value: None,
                },
                a,
            ))
        }
        _ => Err(socm_core::Error::UnsupportedSetting(spec.name().into()).into()),
    }
}

fn check_matches(a: &Archive, spec: &ProblemSpec, problem_seed: u64, path: &Path) -> Result<()> {
    let same = a.get("kind") == Some("ground_truth")
        && a.get("setting") == Some(spec.name())
        && a.get("dim") == Some(spec.dim().to_string().as_str())
        && a.get("problem_seed") == Some(problem_seed.to_string().as_str())
        && a.get("horizon") == Some(format!("{:?}", spec.horizon()).as_str())
        && a.get("noise_level") == Some(format!("{:?}", spec.noise_level()).as_str());
    if same {
        Ok(())
    } else {
        Err(LabError::Config(format!(
            "{} was computed for a different problem",
            path.display()
        )))
    }
}

fn array<'a>(a: &'a Archive, name: &str) -> Result<&'a Matrix> {
    a.array(name).ok_or_else(|| LabError::Checkpoint(name.into()))
}

/// Rebuild a ground truth from tables written by [`compute`].
pub fn load(path: &Path, spec: &ProblemSpec, problem_seed: u64) -> Result<GroundTruth> {
    let a = Archive::load(path)?;
    check_matches(&a, spec, problem_seed, path)?;
    let d = spec.dim();
    match a.get("truth") {
        Some("lqr") => {
            let f = array(&a, "riccati.f")?;
            let tr = array(&a, "riccati.trace_integral")?;
            if f.cols() != d * d || tr.rows() != f.rows() || f.rows() < 2 {
                return Err(LabError::Checkpoint("riccati".into()));
            }
            let c = Arc::new(LqrControl {
                riccati: Arc::new(RiccatiSolution {
                    horizon: spec.horizon(),
                    f: (0..f.rows())
                        .map(|k| Matrix::from_vec(d, d, f.row(k).to_vec()))
                        .collect(),
                    trace_integral: tr.as_slice().to_vec(),
                }),
                sigma: array(&a, "sigma")?.clone(),
                noise_level: spec.noise_level(),
            });
            Ok(GroundTruth {
                control: c.clone(),
                value: Some(c),
            })
        }
        Some("linear_ou") => Ok(GroundTruth::for_problem(spec)?),
        Some("double_well") => {
            let half_width: f64 = a
                .get("grid.half_width")
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| LabError::Checkpoint("grid.half_width".into()))?;
            let map = array(&a, "coordinate_solution")?;
            if map.len() != d {
                return Err(LabError::Checkpoint("coordinate_solution".into()));
            }
            let mut solutions = Vec::new();
            while let Some(c) = a.array(&format!("hjb.{}.control", solutions.len())) {
                let i = solutions.len();
                solutions.push(Arc::new(Hjb1d {
                    half_width,
                    nx: c.cols(),
                    nt: c.rows(),
                    horizon: spec.horizon(),
                    control: c.as_slice().to_vec(),
                    phi_terminal: array(&a, &format!("hjb.{i}.phi_terminal"))?.as_slice().to_vec(),
                    phi_initial: array(&a, &format!("hjb.{i}.phi_initial"))?.as_slice().to_vec(),
                }));
            }
            let coords = map
                .as_slice()
                .iter()
                .map(|&i| solutions.get(i as usize).cloned())
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| LabError::Checkpoint("coordinate_solution".into()))?;
            Ok(GroundTruth {
                control: Arc::new(DoubleWellControl { coords }),
                value: None,
            })
        }
        _ => Err(LabError::Checkpoint("truth".into())),
    }
}

/// Load from `dir` when present, otherwise compute and store there.
pub fn load_or_compute(dir: &Path, spec: &ProblemSpec, problem_seed: u64) -> Result<GroundTruth> {
    let path = cache_file(dir, spec, problem_seed);
    if path.exists() {
        return load(&path, spec, problem_seed);
    }
    std::fs::create_dir_all(dir).map_err(LabError::io(dir))?;
    let (truth, archive) = compute(spec, problem_seed)?;
    archive.save(&path)?;
    Ok(truth)
}
