//! Full runs: balanced initialisation, breeding, integration with
//! diagnostics, and Rossby-number sweeps.

use std::sync::Arc;

use crate::diagnostics::{DiagnosticRecord, Diagnostics};
use crate::error::Result;
use crate::forms::{self, Constants};
use crate::init::{self, PerturbationParams};
use crate::linalg;
use crate::mesh::Mesh;
use crate::spaces::Spaces;
use crate::stepper::{apply_rescaling, RunParams, State, Stepper};

/// A complete run description. `constants` are the unscaled ones; β from
/// `params` is applied when the run starts.
#[derive(Clone, Debug, PartialEq)]
pub struct Experiment {
    pub constants: Constants,
    pub params: RunParams,
    /// Breeding stops when max|v| first reaches this value (m s⁻¹).
    pub breed_threshold: f64,
    /// Breeding fails if the threshold is not reached within this many days.
    pub breed_cap_days: f64,
    /// Days after breeding at which [`Event::Snapshot`] is emitted.
    pub snapshot_days: Vec<f64>,
}

impl Default for Experiment {
    fn default() -> Self {
        Self { constants: Constants::default(), params: RunParams::default(), breed_threshold: 3.0, breed_cap_days: 5.0, snapshot_days: Vec::new() }
    }
}

/// Balance measures of the freshly initialised state, before breeding.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitialBalance {
    pub max_v: f64,
    pub eta_l2: f64,
    /// Largest `|∫σ ∇·u|` over V2 test functions.
    pub max_divergence: f64,
    /// Area-normalised L² norm of `∇·u`.
    pub divergence_l2: f64,
}

/// Progress reported while a run executes.
#[derive(Debug)]
pub enum Event<'a> {
    Initialised { balance: &'a InitialBalance, state: &'a State },
    Bred { steps: usize, days: f64 },
    Record(&'a DiagnosticRecord),
    Snapshot { day: f64, state: &'a State },
}

/// Everything a finished run returns.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub constants: Constants,
    pub balance: InitialBalance,
    pub breeding_steps: usize,
    pub breeding_days: f64,
    /// `(day, max|v|)` during breeding.
    pub breeding_history: Vec<(f64, f64)>,
    /// Records after breeding, starting at time zero.
    pub records: Vec<DiagnosticRecord>,
    /// Largest [`courant`] number seen at record times.
    pub max_courant: f64,
    pub final_state: State,
}

impl Outcome {
    /// `(day, value)` pairs of one record column.
    pub fn series(&self, f: impl Fn(&DiagnosticRecord) -> f64) -> Vec<(f64, f64)> {
        self.records.iter().map(|r| (r.days(), f(r))).collect()
    }
}

impl Experiment {
    /// Constants after the β rescaling.
    pub fn scaled_constants(&self) -> Result<Constants> {
        apply_rescaling(&self.constants, self.params.beta)
    }

    pub fn build_spaces(&self) -> Result<Arc<Spaces>> {
        let k = self.scaled_constants()?;
        let mesh = Mesh::new(self.params.nx, self.params.nz, k.half_width, k.height)?;
        Ok(Arc::new(Spaces::new(mesh, self.params.degree)?))
    }

    pub fn run(&self) -> Result<Outcome> {
        self.run_with(|_| {})
    }

    /// Runs the experiment, passing progress to `observer`.
    pub fn run_with(&self, mut observer: impl FnMut(Event<'_>)) -> Result<Outcome> {
        self.params.validate()?;
        let k = self.scaled_constants()?;
        let spaces = self.build_spaces()?;
        let sp = spaces.as_ref();
        let state0 = init::initialise(sp, &k, &PerturbationParams::standard(&k))?;
        let mut diag = Diagnostics::new(sp, k);
        let balance = initial_balance(sp, &diag, &state0)?;
        observer(Event::Initialised { balance: &balance, state: &state0 });
        if self.params.days == 0.0 {
            // Nothing to integrate: report the initial state only.
            for &d in &self.snapshot_days {
                if d == 0.0 {
                    observer(Event::Snapshot { day: 0.0, state: &state0 });
                }
            }
            return Ok(Outcome {
                constants: k,
                balance,
                breeding_steps: 0,
                breeding_days: 0.0,
                breeding_history: Vec::new(),
                records: Vec::new(),
                max_courant: courant(sp, &state0, self.params.dt),
                final_state: state0,
            });
        }

        let mut stepper = Stepper::new(spaces.clone(), k, self.params.clone())?;
        let bred = init::breed(&mut stepper, &state0, self.breed_threshold, self.breed_cap_days)?;
        observer(Event::Bred { steps: bred.steps, days: bred.days });

        let dt = self.params.dt;
        let nsteps = self.params.steps_for(self.params.days);
        let snap_steps: Vec<(usize, f64)> = self.snapshot_days.iter().map(|&d| (self.params.steps_for(d), d)).collect();
        let mut state = bred.state;
        let mut records = Vec::with_capacity(nsteps / self.params.cadence + 2);
        let mut max_courant = courant(sp, &state, dt);
        let first = diag.record(sp, &state, None)?;
        observer(Event::Record(&first));
        records.push(first);
        emit_snapshots(&snap_steps, 0, &state, &mut observer);
        for step in 1..=nsteps {
            let next = stepper.advance(&state)?;
            let v_d = stepper.advect_v_only(&state.v.values, &stepper.last_report().u_star.clone());
            diag.accumulate(sp, &state.v.values, &v_d);
            if step % self.params.cadence == 0 || step == nsteps {
                let rec = diag.record(sp, &next, Some((&state, dt)))?;
                max_courant = max_courant.max(courant(sp, &next, dt));
                observer(Event::Record(&rec));
                records.push(rec);
            }
            emit_snapshots(&snap_steps, step, &next, &mut observer);
            state = next;
        }
        Ok(Outcome {
            constants: k,
            balance,
            breeding_steps: bred.steps,
            breeding_days: bred.days,
            breeding_history: bred.history,
            records,
            max_courant,
            final_state: state,
        })
    }
}

/// Advective Courant number `Δt (max|u_x| k/Δx + max|u_z| k/Δz)` from the
/// velocity coefficients; the node spacing is taken as `Δx/k`.
pub fn courant(sp: &Spaces, state: &State, dt: f64) -> f64 {
    let k = sp.degree as f64;
    let mut umax = [0.0f64; 2];
    for (d, &u) in state.u.values.iter().enumerate() {
        let c = sp.v1.component_of(d);
        umax[c] = umax[c].max(u.abs());
    }
    dt * k * (umax[0] / sp.mesh.dx() + umax[1] / sp.mesh.dz())
}

fn emit_snapshots(snaps: &[(usize, f64)], step: usize, state: &State, observer: &mut impl FnMut(Event<'_>)) {
    for &(s, day) in snaps {
        if s == step {
            observer(Event::Snapshot { day, state });
        }
    }
}

fn initial_balance(sp: &Spaces, diag: &Diagnostics, state: &State) -> Result<InitialBalance> {
    let eta = diag.imbalance(sp, state)?;
    let div = forms::divergence(sp, &state.u.values);
    // ∇·u lies in V2, so its coefficients are M2⁻¹ ∫σ ∇·u.
    let mut coeffs = div.clone();
    sp.solve_mass(crate::spaces::SpaceId::V2, &mut coeffs);
    let div_field = crate::spaces::Field::new(crate::spaces::SpaceId::V2, coeffs);
    Ok(InitialBalance {
        max_v: state.max_abs_v(),
        eta_l2: crate::diagnostics::l2_mean(sp, &eta),
        max_divergence: linalg::max_abs(&div),
        divergence_l2: crate::diagnostics::l2_mean(sp, &div_field),
    })
}

/// Result of one member of a Rossby-number sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepPoint {
    pub beta: f64,
    pub dt: f64,
    /// Imbalance norm at the end of the run.
    pub eta_l2: f64,
}

/// The β values of the sweep, `2^hi` down to `2^lo`.
pub fn sweep_betas(hi: i32, lo: i32) -> Vec<f64> {
    (lo..=hi).rev().map(|e| 2f64.powi(e)).collect()
}

/// One experiment per β with the time step from [`crate::stepper::dt_for_beta`],
/// each run for `day` days after breeding. Runs are independent, and
/// `jobs > 1` runs them on that many threads.
pub fn sweep(base: &Experiment, betas: &[f64], day: f64, jobs: usize) -> Result<Vec<SweepPoint>> {
    let member = |beta: f64| -> Result<SweepPoint> {
        let dt = crate::stepper::dt_for_beta(beta);
        let e = Experiment { params: RunParams { beta, dt, days: day, ..base.params.clone() }, snapshot_days: Vec::new(), ..base.clone() };
        let out = e.run()?;
        let eta_l2 = out.records.last().map(|r| r.eta_l2).unwrap_or(f64::NAN);
        Ok(SweepPoint { beta, dt, eta_l2 })
    };
    let jobs = jobs.max(1);
    let mut results: Vec<Option<Result<SweepPoint>>> = (0..betas.len()).map(|_| None).collect();
    for (chunk_b, chunk_r) in betas.chunks(jobs).zip(results.chunks_mut(jobs)) {
        std::thread::scope(|s| {
            let handles: Vec<_> = chunk_b.iter().map(|&b| s.spawn(move || member(b))).collect();
            for (h, slot) in handles.into_iter().zip(chunk_r.iter_mut()) {
                *slot = Some(h.join().expect("sweep member panicked"));
            }
        });
    }
    results.into_iter().map(|r| r.expect("every member ran")).collect()
}
