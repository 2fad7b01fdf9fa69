//! Orientation priors: a ring of equally spaced yaw bins, soft assignment of an
//! observation yaw to its 6 nearest bins, and the decode back to an angle.

use std::f64::consts::TAU;

use thiserror::Error;

use crate::geometry::{observation_yaw, project_cuboid, wrap_angle, CameraModel, CuboidHull, GeometryError};

/// Bins carrying weight in every assignment.
pub const SUPPORT_SIZE: usize = 6;
/// Default bin count.
pub const DEFAULT_BIN_COUNT: usize = 18;

// distances closer than this are treated as a tie
const TIE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PriorError {
    #[error("bin count {0} is below the support size {SUPPORT_SIZE}")]
    InvalidBinCount(usize),
    #[error("weighted direction vector is zero")]
    ZeroVector,
    #[error("prior index {index} out of range for {bin_count} bins")]
    IndexOutOfRange { index: usize, bin_count: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorSet {
    bin_count: usize,
    centers: Vec<f64>,
}

impl PriorSet {
    pub fn new(bin_count: usize) -> Result<Self, PriorError> {
        if bin_count < SUPPORT_SIZE {
            return Err(PriorError::InvalidBinCount(bin_count));
        }
        let spacing = TAU / bin_count as f64;
        let centers = (0..bin_count).map(|k| wrap_angle(k as f64 * spacing)).collect();
        Ok(Self { bin_count, centers })
    }

    pub fn bin_count(&self) -> usize {
        self.bin_count
    }

    pub fn spacing(&self) -> f64 {
        TAU / self.bin_count as f64
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn center(&self, index: usize) -> f64 {
        self.centers[index]
    }
}

impl Default for PriorSet {
    fn default() -> Self {
        Self::new(DEFAULT_BIN_COUNT).expect("default bin count is valid")
    }
}

pub fn make_prior_set(bin_count: usize) -> Result<PriorSet, PriorError> {
    PriorSet::new(bin_count)
}

/// The 6 nearest bins with normalized weights, ordered by increasing distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorAssignment {
    pub nearest_index: usize,
    pub support: [(usize, f64); SUPPORT_SIZE],
}

impl PriorAssignment {
    pub fn weight_of(&self, index: usize) -> Option<f64> {
        self.support.iter().find(|(i, _)| *i == index).map(|(_, w)| *w)
    }

    pub fn contains(&self, index: usize) -> bool {
        self.support.iter().any(|(i, _)| *i == index)
    }
}

fn circular_distance(a: f64, b: f64) -> f64 {
    wrap_angle(a - b).abs()
}

/// Orders by distance, treating near-equal distances as ties won by the lower index.
fn closer(a: (usize, f64), b: (usize, f64)) -> bool {
    if (a.1 - b.1).abs() <= TIE_EPS {
        a.0 < b.0
    } else {
        a.1 < b.1
    }
}

pub fn assign_priors(set: &PriorSet, angle: f64) -> PriorAssignment {
    let mut dist: Vec<(usize, f64)> = set
        .centers
        .iter()
        .enumerate()
        .map(|(k, &c)| (k, circular_distance(angle, c)))
        .collect();

    // selection instead of a sort: the tie tolerance is not a total order
    let mut picked = [(0usize, 0.0f64); SUPPORT_SIZE];
    for slot in picked.iter_mut() {
        let best = (1..dist.len()).fold(0, |best, j| if closer(dist[j], dist[best]) { j } else { best });
        *slot = dist.swap_remove(best);
    }

    let half_width = 3.0 * set.spacing();
    let mut support = picked.map(|(k, d)| (k, (1.0 - d / half_width).max(0.0)));
    let total: f64 = support.iter().map(|(_, w)| w).sum();
    for (_, w) in support.iter_mut() {
        *w /= total;
    }
    PriorAssignment { nearest_index: support[0].0, support }
}

/// Decodes an assignment back to an angle in `[-π, π)`.
///
/// The weighted circular mean fixes a reference direction; the result is the
/// weighted linear mean of the bin offsets around that reference, which is
/// exact for the triangular kernel on a uniform grid.
pub fn reconstruct_angle(set: &PriorSet, assignment: &PriorAssignment) -> Result<f64, PriorError> {
    let (mut s, mut c, mut total) = (0.0, 0.0, 0.0);
    for &(k, w) in &assignment.support {
        if k >= set.bin_count {
            return Err(PriorError::IndexOutOfRange { index: k, bin_count: set.bin_count });
        }
        s += w * set.centers[k].sin();
        c += w * set.centers[k].cos();
        total += w;
    }
    if s.abs() < 1e-15 && c.abs() < 1e-15 {
        return Err(PriorError::ZeroVector);
    }
    let reference = s.atan2(c);
    let offset: f64 = assignment
        .support
        .iter()
        .map(|&(k, w)| w * wrap_angle(set.centers[k] - reference))
        .sum();
    Ok(wrap_angle(reference + offset / total))
}

/// Visible-surface regions of a car hull: the two long sides split into
/// front/rear halves, the front and rear faces split into left/right halves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FaceRegion {
    FrontLeft,
    FrontRight,
    LeftFront,
    LeftRear,
    RightFront,
    RightRear,
    RearLeft,
    RearRight,
}

impl FaceRegion {
    pub const ALL: [FaceRegion; 8] = [
        FaceRegion::FrontLeft,
        FaceRegion::FrontRight,
        FaceRegion::LeftFront,
        FaceRegion::LeftRear,
        FaceRegion::RightFront,
        FaceRegion::RightRear,
        FaceRegion::RearLeft,
        FaceRegion::RearRight,
    ];

    /// Outward normal direction in the hull's ground plane (0 = forward, +π/2 = left).
    pub fn normal_angle(self) -> f64 {
        use std::f64::consts::{FRAC_PI_2, PI};
        match self {
            FaceRegion::FrontLeft | FaceRegion::FrontRight => 0.0,
            FaceRegion::LeftFront | FaceRegion::LeftRear => FRAC_PI_2,
            FaceRegion::RearLeft | FaceRegion::RearRight => -PI,
            FaceRegion::RightFront | FaceRegion::RightRear => -FRAC_PI_2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaceRegionMap {
    pub regions: [(FaceRegion, usize); 8],
}

impl FaceRegionMap {
    pub fn prior_for(&self, region: FaceRegion) -> usize {
        self.regions.iter().find(|(r, _)| *r == region).map(|(_, p)| *p).expect("all regions present")
    }
}

pub fn assign_face_regions(
    set: &PriorSet,
    assignment: &PriorAssignment,
    hull: &CuboidHull,
    camera: &CameraModel,
) -> Result<FaceRegionMap, PriorError> {
    project_cuboid(camera, hull)?;
    let obs = observation_yaw(camera, &hull.pose)?;
    for &(k, _) in &assignment.support {
        if k >= set.bin_count {
            return Err(PriorError::IndexOutOfRange { index: k, bin_count: set.bin_count });
        }
    }
    let regions = FaceRegion::ALL.map(|region| {
        let dir = region.normal_angle() + obs;
        let (nx, ny) = (dir.cos(), dir.sin());
        let mut best: Option<(usize, f64)> = None;
        for &(k, _) in &assignment.support {
            let c = set.centers[k];
            let dot = c.cos() * nx + c.sin() * ny;
            best = match best {
                Some((bk, bd)) if bd - dot > TIE_EPS || ((bd - dot).abs() <= TIE_EPS && bk < k) => Some((bk, bd)),
                _ => Some((k, dot)),
            };
        }
        (region, best.expect("support is non-empty").0)
    });
    Ok(FaceRegionMap { regions })
}
