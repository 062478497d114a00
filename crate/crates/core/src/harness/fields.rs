use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::HarnessError;
use crate::fem::PermeabilityField;
use crate::grid::Domain;

/// A region of high conductivity, in domain coordinates. A cell belongs to
/// the shape when its center does.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    /// Axis-aligned rectangle; thin ones are channels.
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Disk { cx: f64, cy: f64, r: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            Shape::Disk { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) < r * r,
        }
    }

    fn inside(&self, d: &Domain) -> bool {
        match *self {
            Shape::Rect { x0, y0, x1, y1 } => x0 >= d.x0 && y0 >= d.y0 && x1 <= d.x1 && y1 <= d.y1 && x0 < x1 && y0 < y1,
            Shape::Disk { cx, cy, r } => {
                r > 0.0 && cx - r >= d.x0 && cx + r <= d.x1 && cy - r >= d.y0 && cy + r <= d.y1
            }
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Rect { x0, y0, x1, y1 } => write!(f, "rect {x0} {y0} {x1} {y1}"),
            Shape::Disk { cx, cy, r } => write!(f, "disk {cx} {cy} {r}"),
        }
    }
}

impl FromStr for Shape {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split_whitespace().collect();
        let nums = |n: usize| -> Result<Vec<f64>, HarnessError> {
            if parts.len() != n + 1 {
                return Err(HarnessError::Config(format!("shape '{s}' needs {n} numbers")));
            }
            parts[1..].iter().map(|p| p.parse().map_err(|_| HarnessError::Config(format!("bad number '{p}'")))).collect()
        };
        match parts.first().copied() {
            Some("rect") => {
                let v = nums(4)?;
                Ok(Shape::Rect { x0: v[0], y0: v[1], x1: v[2], y1: v[3] })
            }
            Some("disk") => {
                let v = nums(3)?;
                Ok(Shape::Disk { cx: v[0], cy: v[1], r: v[2] })
            }
            _ => Err(HarnessError::Config(format!("unknown shape '{s}'"))),
        }
    }
}

/// Square inclusions of random side length, each kept strictly inside one
/// block of `block x block` cells (a coarse element) with a one-cell margin.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RandomInclusions {
    pub count: usize,
    pub size_min: usize,
    pub size_max: usize,
    pub block: usize,
}

impl fmt::Display for RandomInclusions {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {}", self.count, self.size_min, self.size_max, self.block)
    }
}

impl FromStr for RandomInclusions {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let v: Vec<usize> = s
            .split_whitespace()
            .map(|p| p.parse().map_err(|_| HarnessError::Config(format!("bad inclusion count '{p}'"))))
            .collect::<Result<_, _>>()?;
        if v.len() != 4 {
            return Err(HarnessError::Config(format!("inclusions '{s}' needs count size_min size_max block")));
        }
        Ok(RandomInclusions { count: v[0], size_min: v[1], size_max: v[2], block: v[3] })
    }
}

/// Background value plus geometry raised to `background * contrast`.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSpec {
    pub cells_x: usize,
    pub cells_y: usize,
    pub domain: Domain,
    pub background: f64,
    pub contrast: f64,
    pub shapes: Vec<Shape>,
    pub inclusions: Option<RandomInclusions>,
}

impl FieldSpec {
    pub fn constant(cells_x: usize, cells_y: usize, background: f64) -> Self {
        FieldSpec {
            cells_x,
            cells_y,
            domain: Domain::UNIT_SQUARE,
            background,
            contrast: 1.0,
            shapes: Vec::new(),
            inclusions: None,
        }
    }

    /// Looks up a shipped field by name.
    pub fn named(name: &str, contrast: f64) -> Result<Self, HarnessError> {
        match name {
            "inclusions-and-channels" => Ok(inclusions_and_channels(contrast)),
            "channels-8x8" => Ok(channels_8x8(contrast)),
            _ => Err(HarnessError::Config(format!("unknown field '{name}'"))),
        }
    }

    fn cell_rect(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> Shape {
        let (dx, dy) = (self.domain.width() / self.cells_x as f64, self.domain.height() / self.cells_y as f64);
        Shape::Rect {
            x0: self.domain.x0 + x0 as f64 * dx,
            y0: self.domain.y0 + y0 as f64 * dy,
            x1: self.domain.x0 + x1 as f64 * dx,
            y1: self.domain.y0 + y1 as f64 * dy,
        }
    }
}

pub const NAMED_FIELDS: [&str; 2] = ["inclusions-and-channels", "channels-8x8"];

/// 256 x 256 cells for a 16 x 16 coarse grid: four long horizontal channels
/// 64 cells apart, short vertical channels between them and 48 random square
/// inclusions inside coarse cells. Every neighborhood meets at most one
/// horizontal and one vertical channel.
pub fn inclusions_and_channels(contrast: f64) -> FieldSpec {
    let mut spec = FieldSpec::constant(256, 256, 1.0);
    spec.contrast = contrast;
    let horizontal = [(8, 40, 200), (56, 104, 248), (8, 168, 200), (56, 232, 248)];
    for (x0, y, x1) in horizontal {
        spec.shapes.push(spec.cell_rect(x0, y, x1, y + 2));
    }
    let vertical = [(72, 114, 160), (232, 114, 160), (136, 50, 96), (24, 178, 224), (200, 178, 224)];
    for (x, y0, y1) in vertical {
        spec.shapes.push(spec.cell_rect(x, y0, x + 2, y1));
    }
    spec.inclusions = Some(RandomInclusions { count: 48, size_min: 2, size_max: 4, block: 16 });
    spec
}

/// 256 x 256 cells for an 8 x 8 coarse grid: eight horizontal channels 32
/// cells apart and short vertical channels crossing the coarse lines between
/// them. Every neighborhood meets at most two horizontal channels and one
/// vertical one.
pub fn channels_8x8(contrast: f64) -> FieldSpec {
    let mut spec = FieldSpec::constant(256, 256, 1.0);
    spec.contrast = contrast;
    for k in 0..8 {
        let y = 12 + 32 * k;
        spec.shapes.push(spec.cell_rect(8, y, 248, y + 2));
    }
    // gap k lies between horizontal channels k and k + 1 and straddles the
    // coarse line y = 32 (k + 1)
    for k in 0..7 {
        let y0 = 32 * (k + 1) - 12;
        let offset = 16 + 64 * (k % 2);
        for m in 0..2 {
            let x = offset + 128 * m;
            spec.shapes.push(spec.cell_rect(x, y0, x + 2, y0 + 20));
        }
    }
    spec
}

/// Rasterizes `spec`; random inclusions are drawn from a ChaCha8 stream
/// seeded with `seed`.
pub fn generate_field(spec: &FieldSpec, seed: u64) -> Result<PermeabilityField, HarnessError> {
    if spec.cells_x == 0 || spec.cells_y == 0 {
        return Err(HarnessError::Config("field needs at least one cell per direction".into()));
    }
    if !(spec.contrast >= 1.0 && spec.contrast.is_finite()) {
        return Err(HarnessError::Config(format!("contrast {} must be at least 1", spec.contrast)));
    }
    if !(spec.background > 0.0 && spec.background.is_finite()) {
        return Err(HarnessError::Config(format!("background {} must be positive", spec.background)));
    }
    if let Some(bad) = spec.shapes.iter().find(|s| !s.inside(&spec.domain)) {
        return Err(HarnessError::OutOfDomain(bad.to_string()));
    }
    let (nx, ny) = (spec.cells_x, spec.cells_y);
    let high = spec.background * spec.contrast;
    let mut values = vec![spec.background; nx * ny];
    let (dx, dy) = (spec.domain.width() / nx as f64, spec.domain.height() / ny as f64);
    for cy in 0..ny {
        let y = spec.domain.y0 + (cy as f64 + 0.5) * dy;
        for cx in 0..nx {
            let x = spec.domain.x0 + (cx as f64 + 0.5) * dx;
            if spec.shapes.iter().any(|s| s.contains(x, y)) {
                values[cy * nx + cx] = high;
            }
        }
    }
    if let Some(inc) = spec.inclusions {
        let b = inc.block;
        if inc.size_min == 0 || inc.size_min > inc.size_max || b < inc.size_max + 2 || nx % b != 0 || ny % b != 0 {
            return Err(HarnessError::Config(format!("inclusions '{inc}' do not fit the {nx}x{ny} cells")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..inc.count {
            let bx = rng.random_range(0..nx / b);
            let by = rng.random_range(0..ny / b);
            let s = rng.random_range(inc.size_min..=inc.size_max);
            let ox = rng.random_range(1..=b - 1 - s);
            let oy = rng.random_range(1..=b - 1 - s);
            for cy in by * b + oy..by * b + oy + s {
                for cx in bx * b + ox..bx * b + ox + s {
                    values[cy * nx + cx] = high;
                }
            }
        }
    }
    Ok(PermeabilityField::new(nx, ny, values)?)
}
