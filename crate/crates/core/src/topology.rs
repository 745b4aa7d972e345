//! Hexagonal multi-cell layout, MIMO channel generation and the per-user
//! effective gains consumed by the load solver.
//!
//! Channels follow `H_lj = d_lj^(-eta/2) * W_lj` where `W_lj` has i.i.d.
//! CN(0, 1) entries. The unit-variance fading draws are kept on the instance so
//! that user displacement only rescales the pathloss term.

use std::f64::consts::PI;
use std::io::{self, Write};

use nalgebra::{Complex, DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::rng::seeded;

pub type C64 = Complex<f64>;

/// -174 dBm/Hz expressed in W/Hz.
pub const THERMAL_NOISE_PSD: f64 = 3.981_071_705_534_972e-21;

#[derive(Debug, Error, PartialEq)]
pub enum TopologyError {
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("displacement fraction must be finite and non-negative, got {0}")]
    InvalidDisplacement(f64),
}

/// How the per-user transmit symbol vector is chosen from the channel SVD.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SymbolMode {
    /// Principal right singular vector scaled to `||x||^2 = N_T`; the exact
    /// maximizer of `||H x||^2`.
    Principal,
    /// Classic water-filling of the `N_T` power units over the singular
    /// modes, with the given noise-to-power ratio as the water floor scale.
    Waterfill { noise_to_power: f64 },
}

/// Which interference coefficients a [`GainTable`] carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InterferenceMode {
    /// User-level cross gains `h_lkj`; cost grows with the square of the user count.
    Exact,
    /// Rank-1 channel model, `gamma_lj = E |g_lj|^2`.
    LongRange,
    /// Worst-case symbol vector of the interferer, `gamma_lj = (E/N_T) max ||H_lj x||^2`.
    UpperBound,
}

impl InterferenceMode {
    pub fn is_cell_level(self) -> bool {
        !matches!(self, InterferenceMode::Exact)
    }

    pub fn name(self) -> &'static str {
        match self {
            InterferenceMode::Exact => "exact",
            InterferenceMode::LongRange => "long_range",
            InterferenceMode::UpperBound => "upper_bound",
        }
    }
}

impl std::str::FromStr for InterferenceMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exact" => Ok(InterferenceMode::Exact),
            "long_range" => Ok(InterferenceMode::LongRange),
            "upper_bound" => Ok(InterferenceMode::UpperBound),
            other => Err(format!("unknown interference mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub cell_count: usize,
    pub users_per_cell: usize,
    pub tx_antennas: usize,
    pub rx_antennas: usize,
    /// Bandwidth of one resource block, Hz.
    pub rb_bandwidth: f64,
    /// Number of resource blocks that a load of 1.0 corresponds to.
    pub rb_count: usize,
    /// Noise power spectral density, W/Hz.
    pub noise_psd: f64,
    /// Transmit symbol power `E`, W.
    pub symbol_power: f64,
    /// Hexagon circumradius, m.
    pub cell_radius: f64,
    pub pathloss_exponent: f64,
    /// Distances are clamped from below to this reference distance, m.
    pub reference_distance: f64,
    pub symbol_mode: SymbolMode,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            cell_count: 3,
            users_per_cell: 10,
            tx_antennas: 4,
            rx_antennas: 4,
            rb_bandwidth: 180e3,
            rb_count: 400,
            noise_psd: THERMAL_NOISE_PSD,
            symbol_power: 4.0,
            cell_radius: 250.0,
            pathloss_exponent: 3.5,
            reference_distance: 1.0,
            symbol_mode: SymbolMode::Principal,
            seed: 42,
        }
    }
}

impl NetworkConfig {
    /// Seven cells with a hundred users each.
    pub fn full_scale() -> Self {
        Self { cell_count: 7, users_per_cell: 100, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), TopologyError> {
        let bad = |m: &str| Err(TopologyError::InvalidConfig(m.to_string()));
        if self.cell_count == 0 {
            return bad("cell_count must be >= 1");
        }
        if self.users_per_cell == 0 {
            return bad("users_per_cell must be >= 1");
        }
        if self.tx_antennas == 0 || self.rx_antennas == 0 {
            return bad("antenna counts must be >= 1");
        }
        if self.rb_count == 0 {
            return bad("rb_count must be >= 1");
        }
        let positive = [
            ("rb_bandwidth", self.rb_bandwidth),
            ("noise_psd", self.noise_psd),
            ("symbol_power", self.symbol_power),
            ("cell_radius", self.cell_radius),
            ("reference_distance", self.reference_distance),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(TopologyError::InvalidConfig(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(self.pathloss_exponent.is_finite() && self.pathloss_exponent >= 0.0) {
            return bad("pathloss_exponent must be finite and >= 0");
        }
        if let SymbolMode::Waterfill { noise_to_power } = self.symbol_mode {
            if !(noise_to_power.is_finite() && noise_to_power > 0.0) {
                return bad("waterfill noise_to_power must be > 0");
            }
        }
        Ok(())
    }

    /// `N_c = B N_0 N_T / E`.
    pub fn noise_constant(&self) -> f64 {
        self.rb_bandwidth * self.noise_psd * self.tx_antennas as f64 / self.symbol_power
    }

    pub fn total_bandwidth(&self) -> f64 {
        self.rb_bandwidth * self.rb_count as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn distance(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct User {
    pub cell: usize,
    pub position: Point,
}

/// Channel matrices for every (transmitting cell, user) pair.
#[derive(Debug, Clone)]
pub struct ChannelSet {
    rx: usize,
    tx: usize,
    users: usize,
    /// Indexed `[cell * users + user]`.
    matrices: Vec<DMatrix<C64>>,
}

impl ChannelSet {
    pub fn get(&self, cell: usize, user: usize) -> &DMatrix<C64> {
        &self.matrices[cell * self.users + user]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rx, self.tx)
    }

    pub fn len(&self) -> usize {
        self.matrices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct NetworkInstance {
    pub config: NetworkConfig,
    pub cell_centers: Vec<Point>,
    pub users: Vec<User>,
    /// Unit-variance fading draws, same indexing as `channels`.
    fading: Vec<DMatrix<C64>>,
    pub channels: ChannelSet,
}

impl NetworkInstance {
    pub fn cell_count(&self) -> usize {
        self.config.cell_count
    }

    pub fn user_count(&self) -> usize {
        self.users.len()
    }

    pub fn users_in_cell(&self, cell: usize) -> impl Iterator<Item = usize> + '_ {
        self.users.iter().enumerate().filter(move |(_, u)| u.cell == cell).map(|(j, _)| j)
    }

    /// Matrices `H_lj` for every cell and user, serving links included.
    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    /// Matrices from non-serving cells only.
    pub fn cross_channel_count(&self) -> usize {
        (self.cell_count() - 1) * self.user_count()
    }

    /// Moves every user by `fraction` of the cell diameter in a uniformly
    /// random direction and recomputes pathloss. Fading draws and cell
    /// association are kept.
    pub fn displace_users(&self, fraction: f64, seed: u64) -> Result<NetworkInstance, TopologyError> {
        if !(fraction.is_finite() && fraction >= 0.0) {
            return Err(TopologyError::InvalidDisplacement(fraction));
        }
        let mut rng = seeded(seed);
        let step = fraction * 2.0 * self.config.cell_radius;
        let users: Vec<User> = self
            .users
            .iter()
            .map(|u| {
                let theta = rng.random::<f64>() * 2.0 * PI;
                User {
                    cell: u.cell,
                    position: Point {
                        x: u.position.x + step * theta.cos(),
                        y: u.position.y + step * theta.sin(),
                    },
                }
            })
            .collect();
        let channels = scale_channels(&self.config, &self.cell_centers, &users, &self.fading);
        Ok(NetworkInstance {
            config: self.config.clone(),
            cell_centers: self.cell_centers.clone(),
            users,
            fading: self.fading.clone(),
            channels,
        })
    }
}

/// Axial-coordinate hex spiral: center, then ring 1, ring 2, ...
/// Cells are pointy-topped with inter-site distance `sqrt(3) * radius`.
pub fn hex_cell_centers(count: usize, radius: f64) -> Vec<Point> {
    let mut axial = vec![(0i64, 0i64)];
    let dirs = [(1, 0), (1, -1), (0, -1), (-1, 0), (-1, 1), (0, 1)];
    let mut ring = 1i64;
    while axial.len() < count {
        // start at direction 4 scaled by ring, walk six sides
        let (mut q, mut r) = (dirs[4].0 * ring, dirs[4].1 * ring);
        for d in dirs {
            for _ in 0..ring {
                axial.push((q, r));
                q += d.0;
                r += d.1;
            }
        }
        ring += 1;
    }
    axial.truncate(count);
    let s3 = 3f64.sqrt();
    axial
        .into_iter()
        .map(|(q, r)| Point {
            x: radius * s3 * (q as f64 + r as f64 / 2.0),
            y: radius * 1.5 * r as f64,
        })
        .collect()
}

/// True if `p` (relative to the cell center) lies inside a pointy-topped
/// hexagon of circumradius `radius`.
fn inside_hexagon(p: Point, radius: f64) -> bool {
    let (x, y) = (p.x.abs(), p.y.abs());
    let s3 = 3f64.sqrt();
    x <= radius * s3 / 2.0 && y <= radius && s3 * y + x <= radius * s3
}

fn sample_in_hexagon(rng: &mut ChaCha8Rng, radius: f64) -> Point {
    let half_w = radius * 3f64.sqrt() / 2.0;
    loop {
        let p = Point {
            x: rng.random_range(-half_w..=half_w),
            y: rng.random_range(-radius..=radius),
        };
        if inside_hexagon(p, radius) {
            return p;
        }
    }
}

fn complex_gaussian(rng: &mut ChaCha8Rng) -> C64 {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    C64::new(re * s, im * s)
}

fn scale_channels(
    config: &NetworkConfig,
    centers: &[Point],
    users: &[User],
    fading: &[DMatrix<C64>],
) -> ChannelSet {
    let n_users = users.len();
    let mut matrices = Vec::with_capacity(fading.len());
    for (cell, center) in centers.iter().enumerate() {
        for (j, user) in users.iter().enumerate() {
            let d = center.distance(user.position).max(config.reference_distance);
            let amp = (d / config.reference_distance).powf(-config.pathloss_exponent / 2.0);
            matrices.push(&fading[cell * n_users + j] * C64::new(amp, 0.0));
        }
    }
    ChannelSet { rx: config.rx_antennas, tx: config.tx_antennas, users: n_users, matrices }
}

/// Builds the layout, places users and draws channels. Fully determined by
/// `config.seed`.
pub fn generate_instance(config: &NetworkConfig) -> Result<NetworkInstance, TopologyError> {
    config.validate()?;
    let mut rng = seeded(config.seed);
    let centers = hex_cell_centers(config.cell_count, config.cell_radius);
    let mut users = Vec::with_capacity(config.cell_count * config.users_per_cell);
    for (cell, c) in centers.iter().enumerate() {
        for _ in 0..config.users_per_cell {
            let off = sample_in_hexagon(&mut rng, config.cell_radius);
            users.push(User { cell, position: Point { x: c.x + off.x, y: c.y + off.y } });
        }
    }
    let (nr, nt) = (config.rx_antennas, config.tx_antennas);
    let fading: Vec<DMatrix<C64>> = (0..config.cell_count * users.len())
        .map(|_| DMatrix::from_fn(nr, nt, |_, _| complex_gaussian(&mut rng)))
        .collect();
    let channels = scale_channels(config, &centers, &users, &fading);
    Ok(NetworkInstance { config: config.clone(), cell_centers: centers, users, fading, channels })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SymbolVector {
    pub x: DVector<C64>,
    /// `||H x||^2`.
    pub gain: f64,
}

/// Singular values (descending) and matching right singular vectors.
fn right_singular_pairs(h: &DMatrix<C64>) -> Vec<(f64, DVector<C64>)> {
    let svd = h.clone().svd(false, true);
    let v_t = svd.v_t.expect("v_t requested");
    let mut pairs: Vec<(f64, DVector<C64>)> = svd
        .singular_values
        .iter()
        .enumerate()
        .map(|(k, &s)| (s, v_t.row(k).adjoint().into_owned()))
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    pairs
}

/// Water-filling of `total` power units over channels with squared gains
/// `g2`, against unit-normalized noise `noise`. Returns per-mode powers.
pub fn water_fill(g2: &[f64], noise: f64, total: f64) -> Vec<f64> {
    let mut order: Vec<usize> = (0..g2.len()).filter(|&k| g2[k] > 0.0).collect();
    order.sort_by(|&a, &b| g2[b].total_cmp(&g2[a]));
    let mut powers = vec![0.0; g2.len()];
    // shrink the active set until every active mode gets non-negative power
    let mut active = order.len();
    while active > 0 {
        let floor_sum: f64 = order[..active].iter().map(|&k| noise / g2[k]).sum();
        let level = (total + floor_sum) / active as f64;
        let weakest = order[active - 1];
        if level - noise / g2[weakest] >= 0.0 {
            for &k in &order[..active] {
                powers[k] = level - noise / g2[k];
            }
            break;
        }
        active -= 1;
    }
    powers
}

/// Chooses `x` with `||x||^2 = n_t` for channel `h`. A zero channel returns
/// gain 0 and `x = sqrt(n_t) e_1`.
pub fn optimize_symbol_vector(h: &DMatrix<C64>, n_t: usize, mode: SymbolMode) -> SymbolVector {
    let nt = n_t as f64;
    let fallback = || {
        let mut x = DVector::from_element(h.ncols(), C64::new(0.0, 0.0));
        x[0] = C64::new(nt.sqrt(), 0.0);
        SymbolVector { x, gain: 0.0 }
    };
    if h.iter().all(|c| c.norm_sqr() == 0.0) {
        return fallback();
    }
    let pairs = right_singular_pairs(h);
    let x = match mode {
        SymbolMode::Principal => &pairs[0].1 * C64::new(nt.sqrt(), 0.0),
        SymbolMode::Waterfill { noise_to_power } => {
            let g2: Vec<f64> = pairs.iter().map(|(s, _)| s * s).collect();
            let p = water_fill(&g2, noise_to_power, nt);
            let mut x = DVector::from_element(h.ncols(), C64::new(0.0, 0.0));
            for ((_, v), pk) in pairs.iter().zip(&p) {
                x += v * C64::new(pk.sqrt(), 0.0);
            }
            x
        }
    };
    let gain = (h * &x).norm_squared();
    SymbolVector { x, gain }
}

/// Effective gains for the load solver.
///
/// Serving and exact cross gains are in `||H x||^2` units. Cell-level
/// coefficients `gamma` are in received-power units (W) as stored; the solver
/// works with `gamma * N_T / E` so both families share the `N_c` noise scale.
#[derive(Debug, Clone)]
pub struct GainTable {
    pub mode: InterferenceMode,
    pub cell_count: usize,
    /// Serving cell of each user.
    pub user_cell: Vec<usize>,
    /// Users of each cell, in global user indices.
    pub cell_users: Vec<Vec<usize>>,
    /// `h_ij` per user.
    pub serving: Vec<f64>,
    /// Exact mode: `cross_exact[j][l_k]` = `h_lkj`, indexed by the global user
    /// index `k` of the interfering link (zero for same-cell entries).
    pub cross_exact: Vec<Vec<f64>>,
    /// Cell-level modes: `gamma[j * cell_count + l]`, zero for `l` = serving cell.
    pub gamma: Vec<f64>,
    pub noise_constant: f64,
    pub symbol_power: f64,
    pub tx_antennas: usize,
    /// Total bandwidth a load of 1.0 corresponds to, Hz.
    pub bandwidth: f64,
}

impl GainTable {
    pub fn user_count(&self) -> usize {
        self.serving.len()
    }

    pub fn gamma_at(&self, cell: usize, user: usize) -> f64 {
        self.gamma[user * self.cell_count + cell]
    }

    /// Whether any cross-cell coupling exists at all.
    pub fn has_coupling(&self) -> bool {
        if self.cell_count < 2 {
            return false;
        }
        match self.mode {
            InterferenceMode::Exact => self.cross_exact.iter().flatten().any(|&g| g > 0.0),
            _ => self.gamma.iter().any(|&g| g > 0.0),
        }
    }

    /// Writes `(ell, k_or_star, j, gain)` rows. Serving gains use `k = j`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "ell,k_or_star,j,gain")?;
        for (j, &h) in self.serving.iter().enumerate() {
            writeln!(w, "{},{},{},{:e}", self.user_cell[j], j, j, h)?;
        }
        match self.mode {
            InterferenceMode::Exact => {
                for (j, row) in self.cross_exact.iter().enumerate() {
                    for (k, &g) in row.iter().enumerate() {
                        if self.user_cell[k] != self.user_cell[j] {
                            writeln!(w, "{},{},{},{:e}", self.user_cell[k], k, j, g)?;
                        }
                    }
                }
            }
            _ => {
                for j in 0..self.user_count() {
                    for l in 0..self.cell_count {
                        if l != self.user_cell[j] {
                            writeln!(w, "{},*,{},{:e}", l, j, self.gamma_at(l, j))?;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn build_gain_table(instance: &NetworkInstance, mode: InterferenceMode) -> GainTable {
    let cfg = &instance.config;
    let n = instance.user_count();
    let cells = instance.cell_count();
    let user_cell: Vec<usize> = instance.users.iter().map(|u| u.cell).collect();
    let mut cell_users = vec![Vec::new(); cells];
    for (j, &c) in user_cell.iter().enumerate() {
        cell_users[c].push(j);
    }
    let vectors: Vec<SymbolVector> = (0..n)
        .map(|j| optimize_symbol_vector(instance.channels.get(user_cell[j], j), cfg.tx_antennas, cfg.symbol_mode))
        .collect();
    let serving = vectors.iter().map(|v| v.gain).collect();

    let mut cross_exact = Vec::new();
    let mut gamma = Vec::new();
    match mode {
        InterferenceMode::Exact => {
            cross_exact = (0..n)
                .map(|j| {
                    (0..n)
                        .map(|k| {
                            let l = user_cell[k];
                            if l == user_cell[j] {
                                0.0
                            } else {
                                (instance.channels.get(l, j) * &vectors[k].x).norm_squared()
                            }
                        })
                        .collect()
                })
                .collect();
        }
        InterferenceMode::LongRange | InterferenceMode::UpperBound => {
            let e = cfg.symbol_power;
            let nt = cfg.tx_antennas as f64;
            gamma = vec![0.0; n * cells];
            for j in 0..n {
                for l in 0..cells {
                    if l == user_cell[j] {
                        continue;
                    }
                    let h = instance.channels.get(l, j);
                    gamma[j * cells + l] = if mode == InterferenceMode::LongRange {
                        let s = right_singular_pairs(h).first().map_or(0.0, |p| p.0);
                        e * s * s
                    } else {
                        // worst case over the interferer's symbol vectors
                        let worst = optimize_symbol_vector(h, cfg.tx_antennas, SymbolMode::Principal);
                        e / nt * worst.gain
                    };
                }
            }
        }
    }
    GainTable {
        mode,
        cell_count: cells,
        user_cell,
        cell_users,
        serving,
        cross_exact,
        gamma,
        noise_constant: cfg.noise_constant(),
        symbol_power: cfg.symbol_power,
        tx_antennas: cfg.tx_antennas,
        bandwidth: cfg.total_bandwidth(),
    }
}
