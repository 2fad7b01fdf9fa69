//! Pixel anchors for infographic elements and operator-driven visibility.

use nalgebra::Point3;
use thiserror::Error;

use crate::geometry::{project_point, CameraModel, CuboidHull, GeometryError};
use crate::tracker::{Track, TrackState};

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum OverlayError {
    #[error("part anchor requires a hull pose and a camera")]
    MissingPose,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PartId {
    FrontLeftTire,
    FrontRightTire,
    RearLeftTire,
    RearRightTire,
    Driver,
    Rear,
}

impl PartId {
    pub const ALL: [PartId; 6] = [
        PartId::FrontLeftTire,
        PartId::FrontRightTire,
        PartId::RearLeftTire,
        PartId::RearRightTire,
        PartId::Driver,
        PartId::Rear,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PartId::FrontLeftTire => "front_left_tire",
            PartId::FrontRightTire => "front_right_tire",
            PartId::RearLeftTire => "rear_left_tire",
            PartId::RearRightTire => "rear_right_tire",
            PartId::Driver => "driver",
            PartId::Rear => "rear",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.as_str() == s)
    }
}

/// Part locations as fractions of (length/2, width/2, height), with height
/// measured up from the hull's bottom face.
#[derive(Debug, Clone, PartialEq)]
pub struct PartCatalog {
    entries: Vec<(PartId, [f64; 3])>,
}

impl Default for PartCatalog {
    fn default() -> Self {
        Self {
            entries: vec![
                (PartId::FrontLeftTire, [0.8, 1.0, 0.0]),
                (PartId::FrontRightTire, [0.8, -1.0, 0.0]),
                (PartId::RearLeftTire, [-0.8, 1.0, 0.0]),
                (PartId::RearRightTire, [-0.8, -1.0, 0.0]),
                (PartId::Driver, [0.0, 0.0, 0.75]),
                (PartId::Rear, [-1.0, 0.0, 0.4]),
            ],
        }
    }
}

impl PartCatalog {
    /// Overrides one part; `None` when the fractions leave `[-1, 1]² x [0, 1]`.
    pub fn with_part(mut self, part: PartId, fractions: [f64; 3]) -> Option<Self> {
        let [x, y, z] = fractions;
        if !((-1.0..=1.0).contains(&x) && (-1.0..=1.0).contains(&y) && (0.0..=1.0).contains(&z)) {
            return None;
        }
        match self.entries.iter_mut().find(|(p, _)| *p == part) {
            Some(entry) => entry.1 = fractions,
            None => self.entries.push((part, fractions)),
        }
        Some(self)
    }

    pub fn fractions(&self, part: PartId) -> Option<[f64; 3]> {
        self.entries.iter().find(|(p, _)| *p == part).map(|(_, f)| *f)
    }

    /// Part position in the hull's local frame (origin at the hull center).
    pub fn local_point(&self, part: PartId, hull: &CuboidHull) -> Option<Point3<f64>> {
        let [fx, fy, fz] = self.fractions(part)?;
        Some(Point3::new(
            fx * hull.length() / 2.0,
            fy * hull.width() / 2.0,
            fz * hull.height() - hull.height() / 2.0,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorKind {
    Center,
    AboveBox,
    Part(PartId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverlayTemplate {
    pub template_id: u32,
    pub driver_id: u32,
    pub anchor: AnchorKind,
    /// pixels (dx, dy)
    pub offset: (f64, f64),
    pub label: String,
    pub color: [u8; 3],
    pub enabled: bool,
}

/// Default template set: a name tag above each car plus a disabled driver pointer.
pub fn default_templates(driver_ids: impl IntoIterator<Item = u32>) -> Vec<OverlayTemplate> {
    let palette = [[230, 57, 70], [29, 53, 87], [69, 123, 157], [42, 157, 143], [233, 196, 106], [244, 162, 97]];
    let mut out = Vec::new();
    for (i, driver_id) in driver_ids.into_iter().enumerate() {
        let color = palette[i % palette.len()];
        out.push(OverlayTemplate {
            template_id: 2 * i as u32 + 1,
            driver_id,
            anchor: AnchorKind::AboveBox,
            offset: (0.0, -8.0),
            label: format!("Car {driver_id}"),
            color,
            enabled: true,
        });
        out.push(OverlayTemplate {
            template_id: 2 * i as u32 + 2,
            driver_id,
            anchor: AnchorKind::Part(PartId::Driver),
            offset: (0.0, 0.0),
            label: format!("Driver {driver_id}"),
            color,
            enabled: false,
        });
    }
    out
}

pub fn compute_anchor(
    track: &Track,
    template: &OverlayTemplate,
    catalog: &PartCatalog,
    hull: Option<&CuboidHull>,
    camera: Option<&CameraModel>,
) -> Result<(f64, f64), OverlayError> {
    let (dx, dy) = template.offset;
    let (u, v) = match template.anchor {
        AnchorKind::Center => track.bbox.center(),
        AnchorKind::AboveBox => (track.bbox.center().0, track.bbox.y_min),
        AnchorKind::Part(part) => {
            let (Some(hull), Some(camera)) = (hull, camera) else {
                return Err(OverlayError::MissingPose);
            };
            let local = catalog.local_point(part, hull).ok_or(OverlayError::MissingPose)?;
            project_point(camera, &hull.pose.transform_point(&local))?
        }
    };
    Ok((u + dx, v + dy))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderItem {
    pub driver_id: u32,
    pub track_id: u64,
    pub template_id: u32,
    pub anchor: (f64, f64),
    /// template offset plus any collision adjustment
    pub offset: (f64, f64),
    pub state: TrackState,
}

/// One item per enabled template whose driver has a published track, ordered
/// by driver id and then template order. Items whose anchor cannot be
/// computed (no pose, behind the camera) are left out.
pub fn resolve_visible<F>(
    templates: &[OverlayTemplate],
    snapshot: &[Track],
    catalog: &PartCatalog,
    hull_for: F,
    camera: Option<&CameraModel>,
) -> Vec<RenderItem>
where
    F: Fn(u32) -> Option<CuboidHull>,
{
    let mut tracks: Vec<&Track> = snapshot.iter().filter(|t| t.is_published()).collect();
    tracks.sort_by_key(|t| t.driver_id);
    let mut items = Vec::new();
    for track in tracks {
        let hull = hull_for(track.driver_id);
        for template in templates.iter().filter(|t| t.enabled && t.driver_id == track.driver_id) {
            if let Ok(anchor) = compute_anchor(track, template, catalog, hull.as_ref(), camera) {
                items.push(RenderItem {
                    driver_id: track.driver_id,
                    track_id: track.track_id,
                    template_id: template.template_id,
                    anchor,
                    offset: template.offset,
                    state: track.state,
                });
            }
        }
    }
    items
}

const GAP_EPS: f64 = 1e-9;

fn collides(a: (f64, f64), b: (f64, f64), gap: f64) -> bool {
    (a.0 - b.0).abs() < 2.0 * gap && (a.1 - b.1).abs() < gap - GAP_EPS
}

/// Lifts later items (in driver id order) above earlier ones they crowd.
pub fn stack_collisions(mut items: Vec<RenderItem>, min_vertical_gap: f64) -> Vec<RenderItem> {
    if min_vertical_gap <= 0.0 {
        return items;
    }
    items.sort_by_key(|i| i.driver_id);
    let n = items.len();
    for _ in 0..n * n {
        let mut changed = false;
        for i in 1..n {
            for j in 0..i {
                if collides(items[i].anchor, items[j].anchor, min_vertical_gap) {
                    let target = items[j].anchor.1 - min_vertical_gap;
                    let shift = target - items[i].anchor.1;
                    items[i].anchor.1 = target;
                    items[i].offset.1 += shift;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    items
}
