//! Ground-truth dataset generation and the versioned trajectory text
//! format. Snapshots are written with shortest-round-trip decimal
//! formatting, so save/load is bit-exact.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::geometry::{exp_so3, Mat3, Rotation, Vec3};
use crate::integrators::{rollout, StepContext, StepScheme, Storage};
use crate::potentials::{ForcingModel, PotentialModel};
use crate::rigidbody::{BodyParams, BodyState, SystemParams, SystemState};

pub const DATASET_FORMAT_VERSION: u32 = 1;
const MAX_REGEN_RETRIES: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub split: Split,
    /// K+1 equally spaced snapshots, `states[k].t = k * dt` offset from
    /// the initial time.
    pub states: Vec<SystemState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub params: SystemParams,
    pub dt: f64,
    pub fine_h: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Human-readable truth-model description (metadata only).
    pub truth: String,
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn n_bodies(&self) -> usize {
        self.params.n_bodies()
    }

    pub fn k(&self) -> usize {
        self.trajectories.first().map_or(0, |t| t.states.len() - 1)
    }

    pub fn n_train(&self) -> usize {
        self.trajectories.iter().filter(|t| t.split == Split::Train).count()
    }

    pub fn train(&self) -> impl Iterator<Item = &Trajectory> {
        self.trajectories.iter().filter(|t| t.split == Split::Train)
    }

    pub fn val(&self) -> impl Iterator<Item = &Trajectory> {
        self.trajectories.iter().filter(|t| t.split == Split::Val)
    }
}

/// `floor(0.8 L)` training trajectories, remainder validation.
pub fn split_point(l: usize) -> usize {
    (0.8 * l as f64).floor() as usize
}

/// Number of fine substeps per observation; errors unless `fine_h`
/// divides `dt` to 1e-9 relative.
fn substeps_per_observation(dt: f64, fine_h: f64) -> Result<usize> {
    if !(dt > 0.0) || !(fine_h > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "dt and fine_h must be > 0, got {dt} and {fine_h}"
        )));
    }
    let m = (dt / fine_h).round();
    if m < 1.0 || (m * fine_h - dt).abs() > 1e-9 * dt {
        return Err(Error::InvalidParameter(format!(
            "fine_h = {fine_h} does not divide dt = {dt}"
        )));
    }
    Ok(m as usize)
}

fn perturb_component(v: f64, sigma: f64, rng: &mut ChaCha8Rng) -> f64 {
    let xi: f64 = StandardNormal.sample(rng);
    v * (1.0 + sigma * xi)
}

fn perturb_vec(v: Vec3, sigma: f64, rng: &mut ChaCha8Rng) -> Vec3 {
    Vec3::new(
        perturb_component(v.x, sigma, rng),
        perturb_component(v.y, sigma, rng),
        perturb_component(v.z, sigma, rng),
    )
}

/// Multiplicative Gaussian perturbation of one initial condition.
/// Euclidean coordinates are scaled componentwise; the rotation is
/// composed with `exp_so3(sigma * xi)`, the group-multiplicative analog
/// (a raw componentwise scaling would leave SO(3)).
fn perturb_state(init: &SystemState, sigma: f64, rng: &mut ChaCha8Rng) -> SystemState {
    let mut out = init.clone();
    for b in out.bodies.iter_mut() {
        b.q = perturb_vec(b.q, sigma, rng);
        b.p = perturb_vec(b.p, sigma, rng);
        let xi = Vec3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        b.r = b.r.compose(&exp_so3(xi.scale(sigma)));
        b.pi = perturb_vec(b.pi, sigma, rng);
    }
    out
}

/// L trajectories of K+1 snapshots at spacing `dt`, produced by the
/// truth model integrated with Lie T2 at `fine_h` from multiplicatively
/// perturbed copies of `init`. Deterministic in `seed`; a diverging
/// perturbation is re-drawn a bounded number of times.
#[allow(clippy::too_many_arguments)]
pub fn generate_dataset(
    potential: &dyn PotentialModel,
    forcing: &dyn ForcingModel,
    params: &SystemParams,
    init: &SystemState,
    l: usize,
    k: usize,
    dt: f64,
    fine_h: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<Dataset> {
    if l < 1 || k < 1 {
        return Err(Error::InvalidParameter(format!("need L, K >= 1, got {l}, {k}")));
    }
    params.check_state(init)?;
    let m = substeps_per_observation(dt, fine_h)?;
    let ctx = StepContext::new(params, potential, forcing, fine_h);
    let n_train = split_point(l);

    let mut trajectories = Vec::with_capacity(l);
    for traj in 0..l {
        let mut result = None;
        for attempt in 0..MAX_REGEN_RETRIES {
            // one RNG stream per (trajectory, attempt): deterministic and
            // independent of retries in other trajectories
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(traj as u64 * MAX_REGEN_RETRIES + attempt + 1);
            let start = perturb_state(init, noise_sigma, &mut rng);
            match rollout(StepScheme::LieT2, &start, &ctx, k * m, Storage::Stride(m)) {
                Ok(states) => {
                    result = Some(states);
                    break;
                }
                Err(Error::Divergence { .. }) | Err(Error::SingularConfiguration { .. }) => {
                    continue
                }
                Err(e) => return Err(e),
            }
        }
        let states = result.ok_or(Error::Divergence { step: 0 })?;
        let split = if traj < n_train { Split::Train } else { Split::Val };
        trajectories.push(Trajectory { split, states });
    }

    Ok(Dataset {
        params: params.clone(),
        dt,
        fine_h,
        noise_sigma,
        seed,
        truth: String::new(),
        trajectories,
    })
}

fn push_f64s(line: &mut String, values: &[f64]) {
    for v in values {
        line.push(' ');
        line.push_str(&format!("{v}"));
    }
}

/// One snapshot as a text line: t, then per body q(3), p(3),
/// R(9, row-major), Pi(3).
pub fn format_snapshot(state: &SystemState) -> String {
    let mut line = format!("{}", state.t);
    for b in &state.bodies {
        push_f64s(&mut line, &b.q.to_array());
        push_f64s(&mut line, &b.p.to_array());
        push_f64s(&mut line, &b.r.matrix().m);
        push_f64s(&mut line, &b.pi.to_array());
    }
    line
}

pub fn parse_snapshot(line: &str, n_bodies: usize) -> Result<SystemState> {
    let mut nums = line.split_whitespace().map(|s| {
        s.parse::<f64>()
            .map_err(|_| Error::Format(format!("bad number '{s}' in snapshot line")))
    });
    let mut next = |what: &str| -> Result<f64> {
        nums.next().ok_or_else(|| Error::Format(format!("snapshot line truncated at {what}")))?
    };
    let t = next("t")?;
    let mut bodies = Vec::with_capacity(n_bodies);
    for _ in 0..n_bodies {
        let q = Vec3::new(next("q")?, next("q")?, next("q")?);
        let p = Vec3::new(next("p")?, next("p")?, next("p")?);
        let mut m = [0.0; 9];
        for e in m.iter_mut() {
            *e = next("R")?;
        }
        let pi = Vec3::new(next("Pi")?, next("Pi")?, next("Pi")?);
        bodies.push(BodyState { q, p, r: Rotation::from_matrix_unchecked(Mat3 { m }), pi });
    }
    if nums.next().is_some() {
        return Err(Error::Format("trailing fields in snapshot line".into()));
    }
    Ok(SystemState { t, bodies })
}

/// Plain trajectory file: a three-line header and one snapshot line per
/// state, in the dataset snapshot format. Bit-exact round trip.
pub fn save_trajectory(path: &Path, states: &[SystemState]) -> Result<()> {
    let n_bodies = states.first().map_or(0, |s| s.bodies.len());
    let mut out = String::new();
    out.push_str(&format!("liet2-trajectory {DATASET_FORMAT_VERSION}\n"));
    out.push_str(&format!("n_bodies {n_bodies}\n"));
    out.push_str(&format!("n_snapshots {}\n", states.len()));
    for s in states {
        out.push_str(&format_snapshot(s));
        out.push('\n');
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

pub fn load_trajectory(path: &Path) -> Result<Vec<SystemState>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let mut header = |key: &str| -> Result<usize> {
        let line = lines
            .next()
            .ok_or_else(|| Error::Format(format!("trajectory header missing '{key}'")))?;
        let (k, v) = line.split_once(' ').unwrap_or((line, ""));
        if k != key {
            return Err(Error::Format(format!("expected header '{key}', got '{k}'")));
        }
        v.parse().map_err(|_| Error::Format(format!("bad integer '{v}' in trajectory header")))
    };
    let version = header("liet2-trajectory")?;
    if version != DATASET_FORMAT_VERSION as usize {
        return Err(Error::Format(format!("unsupported trajectory version {version}")));
    }
    let n_bodies = header("n_bodies")?;
    let n_snapshots = header("n_snapshots")?;
    let mut states = Vec::with_capacity(n_snapshots);
    for _ in 0..n_snapshots {
        let line = lines
            .next()
            .ok_or_else(|| Error::Format("trajectory file truncated".into()))?;
        states.push(parse_snapshot(line, n_bodies)?);
    }
    if lines.next().is_some() {
        return Err(Error::Format("trailing lines in trajectory file".into()));
    }
    Ok(states)
}

impl Dataset {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str(&format!("liet2-dataset {DATASET_FORMAT_VERSION}\n"));
        out.push_str(&format!("n_bodies {}\n", self.n_bodies()));
        out.push_str(&format!("l {}\n", self.trajectories.len()));
        out.push_str(&format!("k {}\n", self.k()));
        out.push_str(&format!("dt {}\n", self.dt));
        out.push_str(&format!("fine_h {}\n", self.fine_h));
        out.push_str(&format!("noise_sigma {}\n", self.noise_sigma));
        out.push_str(&format!("seed {}\n", self.seed));
        out.push_str(&format!("g {}\n", self.params.g));
        out.push_str(&format!("r_min {}\n", self.params.r_min));
        out.push_str(&format!("truth {}\n", self.truth));
        for bp in &self.params.bodies {
            out.push_str(&format!(
                "body {} {} {} {}\n",
                bp.mass, bp.inertia[0], bp.inertia[1], bp.inertia[2]
            ));
        }
        for (i, traj) in self.trajectories.iter().enumerate() {
            let tag = match traj.split {
                Split::Train => "train",
                Split::Val => "val",
            };
            out.push_str(&format!("traj {i} {tag}\n"));
            for s in &traj.states {
                out.push_str(&format_snapshot(s));
                out.push('\n');
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(out.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        fn field(lines: &mut std::str::Lines<'_>, key: &str) -> Result<String> {
            let line = lines
                .next()
                .ok_or_else(|| Error::Format(format!("dataset header missing '{key}'")))?;
            let (k, v) = line.split_once(' ').unwrap_or((line, ""));
            if k != key {
                return Err(Error::Format(format!("expected header '{key}', got '{k}'")));
            }
            Ok(v.to_string())
        }
        let parse_f = |s: String| -> Result<f64> {
            s.parse().map_err(|_| Error::Format(format!("bad number '{s}' in dataset header")))
        };
        let parse_u = |s: String| -> Result<usize> {
            s.parse().map_err(|_| Error::Format(format!("bad integer '{s}' in dataset header")))
        };

        let version = parse_u(field(&mut lines, "liet2-dataset")?)?;
        if version != DATASET_FORMAT_VERSION as usize {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let n_bodies = parse_u(field(&mut lines, "n_bodies")?)?;
        let l = parse_u(field(&mut lines, "l")?)?;
        let k = parse_u(field(&mut lines, "k")?)?;
        let dt = parse_f(field(&mut lines, "dt")?)?;
        let fine_h = parse_f(field(&mut lines, "fine_h")?)?;
        let noise_sigma = parse_f(field(&mut lines, "noise_sigma")?)?;
        let seed = field(&mut lines, "seed")?
            .parse::<u64>()
            .map_err(|_| Error::Format("bad seed in dataset header".into()))?;
        let g = parse_f(field(&mut lines, "g")?)?;
        let r_min = parse_f(field(&mut lines, "r_min")?)?;
        let truth = field(&mut lines, "truth")?;

        let mut bodies = Vec::with_capacity(n_bodies);
        for _ in 0..n_bodies {
            let line = field(&mut lines, "body")?;
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|s| s.parse().map_err(|_| Error::Format("bad body line".into())))
                .collect::<Result<_>>()?;
            if vals.len() != 4 {
                return Err(Error::Format("body line needs mass and 3 moments".into()));
            }
            bodies.push(BodyParams { mass: vals[0], inertia: [vals[1], vals[2], vals[3]] });
        }
        let mut params = SystemParams::new(bodies, g)?;
        params.r_min = r_min;

        let mut trajectories = Vec::with_capacity(l);
        for i in 0..l {
            let header = field(&mut lines, "traj")?;
            let mut parts = header.split_whitespace();
            let idx: usize = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Format("bad trajectory header".into()))?;
            if idx != i {
                return Err(Error::Format(format!("trajectory {idx} out of order")));
            }
            let split = match parts.next() {
                Some("train") => Split::Train,
                Some("val") => Split::Val,
                other => {
                    return Err(Error::Format(format!("bad split tag {other:?}")));
                }
            };
            let mut states = Vec::with_capacity(k + 1);
            for _ in 0..=k {
                let line = lines
                    .next()
                    .ok_or_else(|| Error::Format("dataset truncated mid-trajectory".into()))?;
                states.push(parse_snapshot(line, n_bodies)?);
            }
            trajectories.push(Trajectory { split, states });
        }
        if lines.next().is_some() {
            return Err(Error::Format("trailing lines in dataset file".into()));
        }
        Ok(Dataset { params, dt, fine_h, noise_sigma, seed, truth, trajectories })
    }
}
