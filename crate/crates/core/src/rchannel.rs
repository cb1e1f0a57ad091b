//! Finite-space lab for r-channel proxies of a labeled multi-mode decode law.
//!
//! A proxy shares `r` channel distributions across `n` modes through a
//! routing map. With disjoint labels its TV to the labeled law splits into a
//! weighted sum of per-mode TVs, so each routing decouples into independent
//! per-channel problems that are solved exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::Serialize;

use crate::access::tv_unchecked;
use crate::error::DiagnosticError;

pub const MAX_QUERY_SPACE: usize = 16;
pub const MAX_MODES: usize = 4;
/// Largest query space on which the simplex grid cross-check runs.
pub const MAX_GRID_QUERY_SPACE: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledLaw {
    pub weights: Vec<f64>,
    /// `nu_m` over the query space, one row per mode.
    pub modes: Vec<Vec<f64>>,
    pub basins: Vec<Vec<usize>>,
}

fn on_simplex(p: &[f64]) -> bool {
    p.iter().all(|x| x.is_finite() && *x >= 0.0) && (p.iter().sum::<f64>() - 1.0).abs() <= 1e-9
}

impl LabeledLaw {
    pub fn new(weights: Vec<f64>, modes: Vec<Vec<f64>>, basins: Vec<Vec<usize>>) -> Result<Self, DiagnosticError> {
        let n = weights.len();
        if n == 0 || modes.len() != n || basins.len() != n {
            return Err(DiagnosticError::Argument("weights, modes and basins must have one entry per mode".into()));
        }
        if !on_simplex(&weights) {
            return Err(DiagnosticError::Argument("mode weights must lie on the simplex".into()));
        }
        let q = modes[0].len();
        if q == 0 || modes.iter().any(|m| m.len() != q || !on_simplex(m)) {
            return Err(DiagnosticError::Argument("every mode must be a distribution on a shared query space".into()));
        }
        let mut seen = vec![false; q];
        for b in &basins {
            for &x in b {
                if x >= q || seen[x] {
                    return Err(DiagnosticError::Argument("basins must be disjoint subsets of the query space".into()));
                }
                seen[x] = true;
            }
        }
        Ok(Self { weights, modes, basins })
    }

    pub fn n(&self) -> usize {
        self.weights.len()
    }

    pub fn q(&self) -> usize {
        self.modes[0].len()
    }

    /// Measured separation slack `max_m (1 - nu_m(R_m))`.
    pub fn eps(&self) -> f64 {
        self.modes
            .iter()
            .zip(&self.basins)
            .map(|(nu, b)| 1.0 - b.iter().map(|&x| nu[x]).sum::<f64>())
            .fold(0.0, f64::max)
            .max(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RChannelProxy {
    pub routing: Vec<usize>,
    pub channels: Vec<Vec<f64>>,
}

impl RChannelProxy {
    pub fn r(&self) -> usize {
        self.channels.len()
    }
}

/// TV between the labeled law and the labeled proxy: `sum_m w_m tv(nu_m, eta_sigma(m))`.
pub fn labeled_tv(law: &LabeledLaw, proxy: &RChannelProxy) -> Result<f64, DiagnosticError> {
    if proxy.routing.len() != law.n() {
        return Err(DiagnosticError::Length(proxy.routing.len(), law.n()));
    }
    if proxy.channels.iter().any(|c| c.len() != law.q() || !on_simplex(c)) {
        return Err(DiagnosticError::Argument("proxy channels must be distributions on the query space".into()));
    }
    if let Some(&j) = proxy.routing.iter().find(|&&j| j >= proxy.r()) {
        return Err(DiagnosticError::Argument(format!("routing targets channel {j} of {}", proxy.r())));
    }
    Ok(law
        .weights
        .iter()
        .zip(&law.modes)
        .zip(&proxy.routing)
        .map(|((w, nu), &j)| w * tv_unchecked(nu, &proxy.channels[j]))
        .sum())
}

/// `max(0, 1 - eps - sum of the r largest weights)`.
pub fn tv_floor(weights: &[f64], eps: f64, r: usize) -> Result<f64, DiagnosticError> {
    if r == 0 || r > weights.len() {
        return Err(DiagnosticError::Argument(format!("r={r} must lie in [1, {}]", weights.len())));
    }
    let mut sorted = weights.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    Ok((1.0 - eps - sorted[..r].iter().sum::<f64>()).max(0.0))
}

/// Exact minimizer of `sum_m w_m tv(nu_m, eta)` over the simplex.
///
/// The objective is a separable sum of convex piecewise-linear functions of
/// each `eta(q)`, so filling unit mass along segments in order of increasing
/// slope is optimal.
pub fn best_channel(members: &[(f64, &[f64])], q: usize) -> (f64, Vec<f64>) {
    if members.is_empty() {
        return (0.0, vec![1.0 / q as f64; q]);
    }
    let total_w: f64 = members.iter().map(|(w, _)| w).sum();
    // (slope, point, segment start, segment length)
    let mut segments: Vec<(f64, usize, f64, f64)> = Vec::new();
    for x in 0..q {
        let mut pts: Vec<(f64, f64)> = members.iter().map(|(w, nu)| (nu[x], *w)).collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut below = 0.0;
        let mut start = 0.0;
        for (v, w) in pts {
            if v > start {
                segments.push((below - (total_w - below), x, start, v - start));
                start = v;
            }
            below += w;
        }
        segments.push((total_w, x, start, f64::INFINITY));
    }
    segments.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.total_cmp(&b.2)));
    let mut eta = vec![0.0; q];
    let mut left = 1.0;
    for (_, x, _, len) in segments {
        if left <= 0.0 {
            break;
        }
        let take = len.min(left);
        eta[x] += take;
        left -= take;
    }
    let cost = members.iter().map(|(w, nu)| w * tv_unchecked(nu, &eta)).sum();
    (cost, eta)
}

/// Grid-search minimum of the same channel objective over the simplex grid
/// with spacing `resolution`.
pub fn grid_channel(members: &[(f64, &[f64])], q: usize, resolution: f64) -> Result<f64, DiagnosticError> {
    if q > MAX_GRID_QUERY_SPACE {
        return Err(DiagnosticError::Size(format!("grid search limited to |Q| <= {MAX_GRID_QUERY_SPACE}")));
    }
    if !(resolution > 0.0 && resolution <= 1.0) {
        return Err(DiagnosticError::Argument(format!("grid resolution must lie in (0, 1], got {resolution}")));
    }
    if members.is_empty() {
        return Ok(0.0);
    }
    let steps = (1.0 / resolution).round() as usize;
    let mut best = f64::INFINITY;
    let mut eta = vec![0.0; q];
    fn walk(
        idx: usize,
        left: usize,
        steps: usize,
        eta: &mut Vec<f64>,
        members: &[(f64, &[f64])],
        best: &mut f64,
    ) {
        let q = eta.len();
        if idx == q - 1 {
            eta[idx] = left as f64 / steps as f64;
            let cost: f64 = members.iter().map(|(w, nu)| w * tv_unchecked(nu, eta)).sum();
            if cost < *best {
                *best = cost;
            }
            return;
        }
        for c in 0..=left {
            eta[idx] = c as f64 / steps as f64;
            walk(idx + 1, left - c, steps, eta, members, best);
        }
    }
    walk(0, steps, steps, &mut eta, members, &mut best);
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BestProxy {
    pub min_tv: f64,
    pub witness: RChannelProxy,
    /// Grid-search optimum for the witness routing, when `|Q|` allows it.
    pub grid_min_tv: Option<f64>,
}

fn routings(n: usize, r: usize) -> Vec<Vec<usize>> {
    let total = r.pow(n as u32);
    (0..total)
        .map(|mut code| {
            let mut sigma = vec![0; n];
            for slot in sigma.iter_mut().rev() {
                *slot = code % r;
                code /= r;
            }
            sigma
        })
        .collect()
}

/// Minimum labeled TV over every routing and exactly optimized channels.
/// Ties go to the lexicographically first routing.
pub fn best_proxy_tv(law: &LabeledLaw, r: usize, grid_resolution: f64) -> Result<BestProxy, DiagnosticError> {
    let (n, q) = (law.n(), law.q());
    if n > MAX_MODES || q > MAX_QUERY_SPACE {
        return Err(DiagnosticError::Size(format!(
            "n={n}, |Q|={q} exceeds limits n <= {MAX_MODES}, |Q| <= {MAX_QUERY_SPACE}"
        )));
    }
    if r == 0 || r > n {
        return Err(DiagnosticError::Argument(format!("r={r} must lie in [1, {n}]")));
    }
    let results: Vec<(f64, Vec<Vec<f64>>, Vec<usize>)> = routings(n, r)
        .into_par_iter()
        .map(|sigma| {
            let mut total = 0.0;
            let mut channels = Vec::with_capacity(r);
            for j in 0..r {
                let members: Vec<(f64, &[f64])> = (0..n)
                    .filter(|&m| sigma[m] == j)
                    .map(|m| (law.weights[m], law.modes[m].as_slice()))
                    .collect();
                let (cost, eta) = best_channel(&members, q);
                total += cost;
                channels.push(eta);
            }
            (total, channels, sigma)
        })
        .collect();
    let mut best = 0;
    for (i, res) in results.iter().enumerate() {
        if res.0 < results[best].0 {
            best = i;
        }
    }
    let (min_tv, channels, routing) = results.into_iter().nth(best).expect("at least one routing");
    let grid_min_tv = if q <= MAX_GRID_QUERY_SPACE {
        let mut g = 0.0;
        for j in 0..r {
            let members: Vec<(f64, &[f64])> = (0..n)
                .filter(|&m| routing[m] == j)
                .map(|m| (law.weights[m], law.modes[m].as_slice()))
                .collect();
            g += grid_channel(&members, q, grid_resolution)?;
        }
        Some(g)
    } else {
        None
    };
    Ok(BestProxy {
        min_tv,
        witness: RChannelProxy { routing, channels },
        grid_min_tv,
    })
}

/// `L * (model gap + contamination + estimation)`.
pub fn lipschitz_task_gap(lipschitz: f64, terms: (f64, f64, f64)) -> Result<f64, DiagnosticError> {
    let (a, b, c) = terms;
    if [lipschitz, a, b, c].iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
        return Err(DiagnosticError::Argument("Lipschitz constant and TV terms must be nonnegative".into()));
    }
    Ok(lipschitz * (a + b + c))
}

fn dirichlet<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

/// Random law with contiguous basins of equal width; each mode puts `1 - eps`
/// on its basin and `eps` outside it, both spread by flat-Dirichlet draws.
pub fn random_separated_law<R: Rng>(
    rng: &mut R,
    weights: &[f64],
    eps: f64,
    q: usize,
) -> Result<LabeledLaw, DiagnosticError> {
    let n = weights.len();
    if n == 0 || q < n + usize::from(eps > 0.0) {
        return Err(DiagnosticError::Argument(format!("|Q|={q} is too small for {n} separated modes")));
    }
    let width = if eps > 0.0 { ((q - 1) / n).max(1) } else { q / n };
    let basins: Vec<Vec<usize>> = (0..n).map(|m| (m * width..(m + 1) * width).collect()).collect();
    let modes = basins
        .iter()
        .map(|b| {
            let mut nu = vec![0.0; q];
            for (x, p) in b.iter().zip(dirichlet(rng, b.len())) {
                nu[*x] = (1.0 - eps) * p;
            }
            if eps > 0.0 {
                let outside: Vec<usize> = (0..q).filter(|x| !b.contains(x)).collect();
                for (x, p) in outside.iter().zip(dirichlet(rng, outside.len())) {
                    nu[*x] = eps * p;
                }
            }
            nu
        })
        .collect();
    LabeledLaw::new(weights.to_vec(), modes, basins)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub n: usize,
    pub weights: Vec<f64>,
    pub eps: f64,
    pub q: usize,
    pub r: usize,
    pub law: usize,
    pub floor: f64,
    pub min_tv: f64,
    pub grid_min_tv: Option<f64>,
}

/// Draws `laws` random separated laws and solves each one exactly. Law `i`
/// uses stream `i` of a generator seeded with `seed`.
pub fn sweep_laws(
    weights: &[f64],
    eps: f64,
    r: usize,
    q: usize,
    laws: usize,
    seed: u64,
    grid_resolution: f64,
) -> Result<Vec<SweepRow>, DiagnosticError> {
    let floor = tv_floor(weights, eps, r)?;
    (0..laws)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let law = random_separated_law(&mut rng, weights, eps, q)?;
            let best = best_proxy_tv(&law, r, grid_resolution)?;
            Ok(SweepRow {
                n: weights.len(),
                weights: weights.to_vec(),
                eps,
                q,
                r,
                law: i,
                floor,
                min_tv: best.min_tv,
                grid_min_tv: best.grid_min_tv,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn point_law() -> LabeledLaw {
        LabeledLaw::new(vec![0.5, 0.5], vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![vec![0], vec![1]]).unwrap()
    }

    #[test]
    fn exact_channels_give_zero() {
        let law = point_law();
        let proxy = RChannelProxy {
            routing: vec![0, 1],
            channels: law.modes.clone(),
        };
        assert_eq!(labeled_tv(&law, &proxy).unwrap(), 0.0);
    }

    #[test]
    fn single_channel_on_one_mode() {
        let law = point_law();
        let proxy = RChannelProxy {
            routing: vec![0, 0],
            channels: vec![law.modes[0].clone()],
        };
        assert_eq!(labeled_tv(&law, &proxy).unwrap(), 0.5);
    }

    #[test]
    fn floor_examples() {
        assert_eq!(tv_floor(&[0.25; 4], 0.0, 1).unwrap(), 0.75);
        assert!((tv_floor(&[0.7, 0.3], 0.1, 1).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(tv_floor(&[0.5, 0.5], 0.0, 2).unwrap(), 0.0);
    }

    #[test]
    fn point_masses_with_one_channel() {
        let best = best_proxy_tv(&point_law(), 1, 0.02).unwrap();
        assert!((best.min_tv - 0.5).abs() < 1e-12);
        assert!((best.grid_min_tv.unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(best.witness.routing, vec![0, 0]);
    }

    #[test]
    fn free_channels_reach_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let law = random_separated_law(&mut rng, &[0.2, 0.3, 0.5], 0.1, 9).unwrap();
        assert!(best_proxy_tv(&law, 3, 0.05).unwrap().min_tv < 1e-12);
    }

    #[test]
    fn exact_channel_beats_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let law = random_separated_law(&mut rng, &[0.3, 0.3, 0.4], 0.1, 4).unwrap();
            let members: Vec<(f64, &[f64])> = (0..3).map(|m| (law.weights[m], law.modes[m].as_slice())).collect();
            let (exact, eta) = best_channel(&members, 4);
            assert!((eta.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let grid = grid_channel(&members, 4, 0.02).unwrap();
            assert!(exact <= grid + 1e-12);
            // one grid step moves each coordinate by at most the resolution
            assert!(grid - exact <= 0.02 * 2.0);
        }
    }

    #[test]
    fn size_limits() {
        let law = LabeledLaw::new(vec![1.0], vec![vec![1.0 / 17.0; 17]], vec![vec![0]]).unwrap();
        assert!(matches!(best_proxy_tv(&law, 1, 0.1), Err(DiagnosticError::Size(_))));
    }

    #[test]
    fn lipschitz_examples() {
        assert_eq!(lipschitz_task_gap(3.0, (0.0, 0.0, 0.0)).unwrap(), 0.0);
        assert!((lipschitz_task_gap(2.0, (0.1, 0.05, 0.05)).unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(lipschitz_task_gap(0.0, (0.3, 0.2, 0.1)).unwrap(), 0.0);
    }
}
