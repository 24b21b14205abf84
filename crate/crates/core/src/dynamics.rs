//! The three forced prototype systems and their Euler–Maruyama integration.
//!
//! Every system records one scalar observable per grid point: `x` for the
//! saddle-node normal form, `Re Z` for the Bautin system and the soil
//! temperature `T` for the compost-bomb model. Grid point `k` sits at model
//! time `t0 + k * dt`; point 0 is the initial state.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Noiseless critical forcing rate of the saddle-node prototype.
pub const SADDLE_CRITICAL_RATE: f64 = 4.0 / 3.0;

/// Any state component beyond this magnitude marks the trajectory diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Smooth ramp `0.5 * max * (tanh(0.5 * max * rate * t) + 1)`.
pub fn tanh_ramp_forcing(t: f64, rate: f64, max: f64) -> f64 {
    0.5 * max * ((0.5 * max * rate * t).tanh() + 1.0)
}

/// Time derivative of [`tanh_ramp_forcing`].
pub fn tanh_ramp_rate(t: f64, rate: f64, max: f64) -> f64 {
    let sech = 1.0 / (0.5 * max * rate * t).cosh();
    0.25 * max * max * rate * sech * sech
}

/// Air temperature `v * t`.
pub fn linear_forcing(t: f64, v: f64) -> f64 {
    v * t
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum System {
    Saddle,
    Bautin,
    Compost,
}

impl System {
    pub const ALL: [System; 3] = [System::Saddle, System::Bautin, System::Compost];

    pub fn dimension(self) -> usize {
        match self {
            System::Saddle => 1,
            System::Bautin | System::Compost => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            System::Saddle => "saddle",
            System::Bautin => "bautin",
            System::Compost => "compost",
        }
    }
}

impl fmt::Display for System {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for System {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "saddle" => Ok(System::Saddle),
            "bautin" => Ok(System::Bautin),
            "compost" => Ok(System::Compost),
            other => Err(Error::InvalidConfig(format!("unknown system `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaddleParams {
    pub lambda_max: f64,
    /// Forcing rate.
    pub eps: f64,
    pub noise_d1: f64,
}

impl Default for SaddleParams {
    fn default() -> Self {
        Self {
            lambda_max: 3.0,
            eps: 1.25,
            noise_d1: 0.008,
        }
    }
}

impl SaddleParams {
    pub fn forcing(&self, t: f64) -> f64 {
        tanh_ramp_forcing(t, self.eps, self.lambda_max)
    }

    fn validate(&self) -> Result<()> {
        if !(self.lambda_max > 0.0 && self.eps > 0.0 && self.noise_d1 >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "saddle parameters out of range: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BautinParams {
    pub lambda_max: f64,
    /// Forcing rate `r`.
    pub rate: f64,
    pub a: f64,
    pub omega: f64,
    pub b: f64,
    pub noise_d2: f64,
}

impl Default for BautinParams {
    fn default() -> Self {
        Self {
            lambda_max: 8.0,
            rate: 0.1,
            a: 0.1,
            omega: 3.0,
            b: 1.0,
            noise_d2: 0.2,
        }
    }
}

impl BautinParams {
    pub fn forcing(&self, t: f64) -> f64 {
        tanh_ramp_forcing(t, self.rate, self.lambda_max)
    }

    /// Radius of the attracting limit cycle of the frozen system.
    pub fn stable_cycle_radius(&self) -> f64 {
        let disc = self.b * self.b - 4.0 * self.a;
        (0.5 * (self.b - disc.sqrt())).sqrt()
    }

    /// Radius of the repelling cycle bounding the basin.
    pub fn unstable_cycle_radius(&self) -> f64 {
        let disc = self.b * self.b - 4.0 * self.a;
        (0.5 * (self.b + disc.sqrt())).sqrt()
    }

    fn validate(&self) -> Result<()> {
        let positive = [self.lambda_max, self.rate, self.a, self.omega, self.b]
            .iter()
            .all(|v| *v > 0.0);
        if !positive || self.noise_d2 < 0.0 || self.b * self.b - 4.0 * self.a <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "bautin parameters out of range: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Argument of the exponential in the respiration rate `r0 * exp(alpha * _)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RespirationArg {
    /// Respiration grows with soil temperature (the feedback form).
    #[default]
    SoilTemperature,
    /// Respiration grows with elapsed model time.
    ElapsedTime,
}

/// How the compost-bomb noise amplitude enters the temperature increment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompostNoise {
    /// `dT += D3 dW`.
    #[default]
    Direct,
    /// `mu dT += D3 dW`, i.e. the increment is divided by the heat capacity.
    PerHeatCapacity,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompostParams {
    /// Litter fall, kg m^-2 yr^-1.
    pub litter_fall: f64,
    /// Respiration prefactor, yr^-1.
    pub r0: f64,
    pub alpha: f64,
    /// Soil heat capacity, J m^-2 degC^-1.
    pub heat_capacity: f64,
    /// Specific heat of respiration, J kg^-1.
    pub respiration_heat: f64,
    /// Soil-to-air heat transfer, J yr^-1 m^-2 degC^-1.
    pub heat_transfer: f64,
    /// Warming rate, degC yr^-1.
    pub warming_rate: f64,
    pub noise_d3: f64,
    #[serde(default)]
    pub respiration_arg: RespirationArg,
    #[serde(default)]
    pub noise_scaling: CompostNoise,
    /// Initial carbon stock as a fraction of the steady state at `T0`.
    pub initial_carbon_fraction: f64,
}

impl Default for CompostParams {
    fn default() -> Self {
        Self {
            litter_fall: 1.055,
            r0: 0.01,
            alpha: 2.5f64.ln() / 10.0,
            heat_capacity: 2.5e6,
            respiration_heat: 3.9e7,
            heat_transfer: 5.049e6,
            warming_rate: 0.1,
            noise_d3: 0.5,
            respiration_arg: RespirationArg::SoilTemperature,
            noise_scaling: CompostNoise::Direct,
            initial_carbon_fraction: 0.7,
        }
    }
}

impl CompostParams {
    pub fn air_temperature(&self, t: f64) -> f64 {
        linear_forcing(t, self.warming_rate)
    }

    pub fn respiration(&self, soil_temperature: f64, t: f64) -> f64 {
        let arg = match self.respiration_arg {
            RespirationArg::SoilTemperature => soil_temperature,
            RespirationArg::ElapsedTime => t,
        };
        self.r0 * (self.alpha * arg).exp()
    }

    /// Steady soil temperature `Ta(t) + A * Pi / lambda`.
    pub fn equilibrium_temperature(&self, t: f64) -> f64 {
        self.air_temperature(t) + self.respiration_heat * self.litter_fall / self.heat_transfer
    }

    /// Steady carbon stock `Pi / r(T)` at the steady temperature.
    pub fn equilibrium_carbon(&self, t: f64) -> f64 {
        self.litter_fall / self.respiration(self.equilibrium_temperature(t), t)
    }

    fn noise_on_temperature(&self) -> f64 {
        match self.noise_scaling {
            CompostNoise::Direct => self.noise_d3,
            CompostNoise::PerHeatCapacity => self.noise_d3 / self.heat_capacity,
        }
    }

    fn validate(&self) -> Result<()> {
        let positive = [
            self.litter_fall,
            self.r0,
            self.alpha,
            self.heat_capacity,
            self.respiration_heat,
            self.heat_transfer,
            self.warming_rate,
            self.initial_carbon_fraction,
        ]
        .iter()
        .all(|v| *v > 0.0);
        if !positive || self.noise_d3 < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "compost parameters out of range: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "system", rename_all = "snake_case")]
pub enum SystemParams {
    Saddle(SaddleParams),
    Bautin(BautinParams),
    Compost(CompostParams),
}

impl SystemParams {
    pub fn default_for(system: System) -> Self {
        match system {
            System::Saddle => SystemParams::Saddle(SaddleParams::default()),
            System::Bautin => SystemParams::Bautin(BautinParams::default()),
            System::Compost => SystemParams::Compost(CompostParams::default()),
        }
    }

    pub fn system(&self) -> System {
        match self {
            SystemParams::Saddle(_) => System::Saddle,
            SystemParams::Bautin(_) => System::Bautin,
            SystemParams::Compost(_) => System::Compost,
        }
    }

    /// The forcing rate (`eps`, `r` or `v`).
    pub fn forcing_rate(&self) -> f64 {
        match self {
            SystemParams::Saddle(p) => p.eps,
            SystemParams::Bautin(p) => p.rate,
            SystemParams::Compost(p) => p.warming_rate,
        }
    }

    pub fn with_forcing_rate(mut self, rate: f64) -> Self {
        match &mut self {
            SystemParams::Saddle(p) => p.eps = rate,
            SystemParams::Bautin(p) => p.rate = rate,
            SystemParams::Compost(p) => p.warming_rate = rate,
        }
        self
    }

    pub fn noise(&self) -> f64 {
        match self {
            SystemParams::Saddle(p) => p.noise_d1,
            SystemParams::Bautin(p) => p.noise_d2,
            SystemParams::Compost(p) => p.noise_d3,
        }
    }

    pub fn with_noise(mut self, level: f64) -> Self {
        match &mut self {
            SystemParams::Saddle(p) => p.noise_d1 = level,
            SystemParams::Bautin(p) => p.noise_d2 = level,
            SystemParams::Compost(p) => p.noise_d3 = level,
        }
        self
    }

    /// Value of the external forcing at time `t` (lambda, Lambda or Ta).
    pub fn forcing(&self, t: f64) -> f64 {
        match self {
            SystemParams::Saddle(p) => p.forcing(t),
            SystemParams::Bautin(p) => p.forcing(t),
            SystemParams::Compost(p) => p.air_temperature(t),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            SystemParams::Saddle(p) => p.validate(),
            SystemParams::Bautin(p) => p.validate(),
            SystemParams::Compost(p) => p.validate(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub components: Vec<f64>,
    pub t: f64,
}

impl State {
    pub fn new(components: Vec<f64>, t: f64) -> Self {
        Self { components, t }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub params: SystemParams,
    pub dt: f64,
    pub n_steps: usize,
    pub t0: f64,
    pub initial_state: Vec<f64>,
}

impl SystemConfig {
    /// Default grid and equilibrium start for the given parameters.
    ///
    /// Saddle and Bautin cover `t in [-6, 6)` at `dt = 0.01`, which puts the
    /// ramp midpoint at grid point 600; compost covers 120 years at `dt = 0.1`.
    pub fn new(params: SystemParams) -> Self {
        let (dt, t0) = match params {
            SystemParams::Saddle(_) | SystemParams::Bautin(_) => (0.01, -6.0),
            SystemParams::Compost(_) => (0.1, 0.0),
        };
        let mut config = Self {
            params,
            dt,
            n_steps: 1200,
            t0,
            initial_state: Vec::new(),
        };
        config.initial_state = config.equilibrium_start();
        config
    }

    pub fn default_for(system: System) -> Self {
        Self::new(SystemParams::default_for(system))
    }

    pub fn system(&self) -> System {
        self.params.system()
    }

    /// Replace the parameters and re-derive the equilibrium start.
    pub fn with_params(&self, params: SystemParams) -> Self {
        let mut config = self.clone();
        config.params = params;
        config.initial_state = config.equilibrium_start();
        config
    }

    /// Model time of grid point `k`.
    pub fn time_at(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    /// Start on the attractor of the system frozen at `t0`.
    pub fn equilibrium_start(&self) -> Vec<f64> {
        let t0 = self.t0;
        match &self.params {
            SystemParams::Saddle(p) => vec![-p.forcing(t0) - 1.0],
            SystemParams::Bautin(p) => vec![p.forcing(t0) + p.stable_cycle_radius(), 0.0],
            SystemParams::Compost(p) => {
                let temperature = p.equilibrium_temperature(t0);
                let carbon = p.litter_fall / p.respiration(temperature, t0);
                vec![p.initial_carbon_fraction * carbon, temperature]
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if !(self.dt > 0.0) || self.n_steps == 0 || !self.t0.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "grid out of range: dt {}, n_steps {}, t0 {}",
                self.dt, self.n_steps, self.t0
            )));
        }
        let dim = self.system().dimension();
        if self.initial_state.len() != dim {
            return Err(Error::StateDimension {
                expected: dim,
                got: self.initial_state.len(),
            });
        }
        Ok(())
    }

    /// Index of the recorded observable within the state vector.
    pub fn observable_index(&self) -> usize {
        match self.system() {
            System::Saddle | System::Bautin => 0,
            System::Compost => 1,
        }
    }

    pub fn noise_count(&self) -> usize {
        match self.system() {
            System::Saddle | System::Compost => 1,
            System::Bautin => 2,
        }
    }

    /// Grid point closest to the maximum of the forcing's time derivative.
    pub fn max_forcing_rate_step(&self) -> usize {
        let mut best = 0;
        let mut best_rate = f64::NEG_INFINITY;
        for k in 0..self.n_steps {
            let t = self.time_at(k);
            let rate = match &self.params {
                SystemParams::Saddle(p) => tanh_ramp_rate(t, p.eps, p.lambda_max),
                SystemParams::Bautin(p) => tanh_ramp_rate(t, p.rate, p.lambda_max),
                // Constant warming: every step ties, keep the first.
                SystemParams::Compost(p) => p.warming_rate,
            };
            if rate > best_rate {
                best_rate = rate;
                best = k;
            }
        }
        best
    }

    #[inline]
    fn drift_fast(&self, x: &[f64; 2], t: f64) -> [f64; 2] {
        match &self.params {
            SystemParams::Saddle(p) => {
                let y = x[0] + p.forcing(t);
                [y * y - 1.0, 0.0]
            }
            SystemParams::Bautin(p) => {
                let (re, im) = (x[0] - p.forcing(t), x[1]);
                let m2 = re * re + im * im;
                let radial = p.a - p.b * m2 + m2 * m2;
                // (a + i w) W - b |W|^2 W + |W|^4 W
                [radial * re - p.omega * im, radial * im + p.omega * re]
            }
            SystemParams::Compost(p) => {
                let (c, temp) = (x[0], x[1]);
                let resp = c * p.respiration(temp, t);
                [
                    p.litter_fall - resp,
                    (p.respiration_heat * resp - p.heat_transfer * (temp - p.air_temperature(t)))
                        / p.heat_capacity,
                ]
            }
        }
    }

    #[inline]
    fn step_fast(&self, x: &mut [f64; 2], t: f64, gaussians: &[f64]) {
        let f = self.drift_fast(x, t);
        let sdt = self.dt.sqrt();
        match &self.params {
            SystemParams::Saddle(p) => {
                x[0] += f[0] * self.dt + (2.0 * p.noise_d1).sqrt() * sdt * gaussians[0];
            }
            SystemParams::Bautin(p) => {
                x[0] += f[0] * self.dt + p.noise_d2 * sdt * gaussians[0];
                x[1] += f[1] * self.dt + p.noise_d2 * sdt * gaussians[1];
            }
            SystemParams::Compost(p) => {
                x[0] += f[0] * self.dt;
                x[1] += f[1] * self.dt + p.noise_on_temperature() * sdt * gaussians[0];
            }
        }
    }
}

fn pack(config: &SystemConfig, state: &State) -> Result<[f64; 2]> {
    let dim = config.system().dimension();
    if state.components.len() != dim {
        return Err(Error::StateDimension {
            expected: dim,
            got: state.components.len(),
        });
    }
    if state.components.iter().any(|v| !v.is_finite()) {
        return Err(Error::DivergedState { t: state.t });
    }
    let mut x = [0.0; 2];
    x[..dim].copy_from_slice(&state.components);
    Ok(x)
}

/// Deterministic drift at `(state, t)`, forcing included.
pub fn drift(config: &SystemConfig, state: &State, t: f64) -> Result<Vec<f64>> {
    let x = pack(config, state)?;
    let dim = config.system().dimension();
    Ok(config.drift_fast(&x, t)[..dim].to_vec())
}

/// One Euler–Maruyama step; `gaussians` holds one standard normal per
/// noisy component.
pub fn em_step(config: &SystemConfig, state: &State, gaussians: &[f64]) -> Result<State> {
    let mut x = pack(config, state)?;
    if gaussians.len() != config.noise_count() {
        return Err(Error::ShapeMismatch {
            what: "gaussian draws",
            expected: config.noise_count(),
            got: gaussians.len(),
        });
    }
    config.step_fast(&mut x, state.t, gaussians);
    let t = state.t + config.dt;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::DivergedState { t });
    }
    let dim = config.system().dimension();
    Ok(State::new(x[..dim].to_vec(), t))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// One observable sample per grid point.
    pub observable: Vec<f64>,
    /// Grid point at which the divergence guard fired.
    pub diverged_at: Option<usize>,
    /// Full state per grid point, row-major `n_steps x dimension`, when requested.
    pub states: Option<Vec<f64>>,
}

/// Noise stream for a trajectory with the given seed.
pub fn trajectory_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Integrate one path. Pure in `(config, seed)`.
pub fn simulate_trajectory(config: &SystemConfig, seed: u64) -> Result<Trajectory> {
    simulate(config, seed, false)
}

/// Like [`simulate_trajectory`] but also keeps every state component.
pub fn simulate_trajectory_full(config: &SystemConfig, seed: u64) -> Result<Trajectory> {
    simulate(config, seed, true)
}

pub(crate) fn simulate(config: &SystemConfig, seed: u64, keep_states: bool) -> Result<Trajectory> {
    config.validate()?;
    let dim = config.system().dimension();
    let obs_index = config.observable_index();
    let n_noise = config.noise_count();
    let mut rng = trajectory_rng(seed);

    let mut x = [0.0; 2];
    x[..dim].copy_from_slice(&config.initial_state);
    let mut observable = Vec::with_capacity(config.n_steps);
    let mut states = keep_states.then(|| Vec::with_capacity(config.n_steps * dim));
    observable.push(x[obs_index]);
    if let Some(s) = states.as_mut() {
        s.extend_from_slice(&x[..dim]);
    }

    let mut diverged_at = None;
    let mut gaussians = [0.0; 2];
    for k in 1..config.n_steps {
        if diverged_at.is_some() {
            let last = *observable.last().expect("non-empty");
            observable.push(last);
            if let Some(s) = states.as_mut() {
                let start = s.len() - dim;
                s.extend_from_within(start..);
            }
            continue;
        }
        for g in gaussians.iter_mut().take(n_noise) {
            *g = StandardNormal.sample(&mut rng);
        }
        let previous = x;
        config.step_fast(&mut x, config.time_at(k - 1), &gaussians[..n_noise]);
        let blown = x[..dim]
            .iter()
            .any(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT);
        if blown {
            diverged_at = Some(k);
            if !x[..dim].iter().all(|v| v.is_finite()) {
                x = previous;
            }
        }
        observable.push(x[obs_index]);
        if let Some(s) = states.as_mut() {
            s.extend_from_slice(&x[..dim]);
        }
    }
    Ok(Trajectory {
        observable,
        diverged_at,
        states,
    })
}
