//! Synthetic shapes-and-captions dataset: one coloured shape per 32x32 image
//! on a black background, captioned from a fixed template.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::image::ImageTensor;
use super::pair::{ImageRef, ImageTextPair, Manifest};
use crate::artifact::Provenance;
use crate::{Error, Result};

pub const IMAGE_SIZE: usize = 32;
const HALF_EXTENT: i64 = 6;
const ARM_HALF_WIDTH: i64 = 2;

pub const COLORS: [(&str, [u8; 3]); 8] = [
    ("red", [255, 0, 0]),
    ("green", [0, 255, 0]),
    ("blue", [0, 0, 255]),
    ("yellow", [255, 255, 0]),
    ("purple", [255, 0, 255]),
    ("cyan", [0, 255, 255]),
    ("white", [255, 255, 255]),
    ("orange", [255, 128, 0]),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Position {
    Left,
    Right,
    Top,
    Bottom,
    Center,
}

pub const SHAPES: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cross];
pub const POSITIONS: [Position; 5] = [
    Position::Left,
    Position::Right,
    Position::Top,
    Position::Bottom,
    Position::Center,
];

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
        }
    }

    fn covers(self, dx: i64, dy: i64) -> bool {
        if dx < -HALF_EXTENT || dx >= HALF_EXTENT || dy < -HALF_EXTENT || dy >= HALF_EXTENT {
            return false;
        }
        match self {
            Shape::Square => true,
            Shape::Circle => {
                let (x, y) = (dx as f64 + 0.5, dy as f64 + 0.5);
                x * x + y * y <= (HALF_EXTENT * HALF_EXTENT) as f64
            }
            Shape::Triangle => {
                let row = dy + HALF_EXTENT;
                let half_width = (row + 2) / 2;
                dx >= -half_width && dx < half_width
            }
            Shape::Cross => {
                (-ARM_HALF_WIDTH..ARM_HALF_WIDTH).contains(&dx)
                    || (-ARM_HALF_WIDTH..ARM_HALF_WIDTH).contains(&dy)
            }
        }
    }
}

impl Position {
    pub fn name(self) -> &'static str {
        match self {
            Position::Left => "left",
            Position::Right => "right",
            Position::Top => "top",
            Position::Bottom => "bottom",
            Position::Center => "center",
        }
    }

    /// Shape centre as (x, y) pixel coordinates.
    pub fn center(self) -> (i64, i64) {
        let s = IMAGE_SIZE as i64;
        match self {
            Position::Left => (s / 4, s / 2),
            Position::Right => (3 * s / 4, s / 2),
            Position::Top => (s / 2, s / 4),
            Position::Bottom => (s / 2, 3 * s / 4),
            Position::Center => (s / 2, s / 2),
        }
    }
}

/// One cell of the colour x shape x position grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ShapeSpec {
    pub color: usize,
    pub shape: Shape,
    pub position: Position,
}

impl ShapeSpec {
    pub fn all() -> Vec<ShapeSpec> {
        let mut out = Vec::with_capacity(COLORS.len() * SHAPES.len() * POSITIONS.len());
        for color in 0..COLORS.len() {
            for &shape in &SHAPES {
                for &position in &POSITIONS {
                    out.push(ShapeSpec {
                        color,
                        shape,
                        position,
                    });
                }
            }
        }
        out
    }

    pub fn color_name(&self) -> &'static str {
        COLORS[self.color].0
    }

    pub fn caption(&self) -> String {
        let place = match self.position {
            Position::Center => "in the center".to_string(),
            p => format!("on the {}", p.name()),
        };
        format!("a {} {} {place}", self.color_name(), self.shape.name())
    }

    pub fn words(&self) -> String {
        format!(
            "{} {} {}",
            self.color_name(),
            self.shape.name(),
            self.position.name()
        )
    }

    pub fn render(&self) -> ImageTensor {
        let mut img = ImageTensor::zeros(3, IMAGE_SIZE, IMAGE_SIZE);
        let (cx, cy) = self.position.center();
        let rgb = COLORS[self.color].1;
        for y in 0..IMAGE_SIZE {
            for x in 0..IMAGE_SIZE {
                if self.shape.covers(x as i64 - cx, y as i64 - cy) {
                    for (c, &v) in rgb.iter().enumerate() {
                        img.set(c, y, x, f64::from(v) / 255.0);
                    }
                }
            }
        }
        img
    }
}

pub fn max_synthetic_pairs() -> usize {
    COLORS.len() * SHAPES.len() * POSITIONS.len()
}

/// Every caption the template can produce.
pub fn template_captions() -> Vec<String> {
    ShapeSpec::all().iter().map(ShapeSpec::caption).collect()
}

/// Draws `n` distinct grid cells in a seeded order. Images are inline.
pub fn generate_synthetic_specs(n: usize, seed: u64) -> Result<Vec<ShapeSpec>> {
    if n < 2 {
        return Err(Error::Generation(format!("need at least 2 pairs, got {n}")));
    }
    let mut all = ShapeSpec::all();
    if n > all.len() {
        return Err(Error::Generation(format!(
            "{n} pairs requested but only {} distinct (color, shape, position) combinations exist",
            all.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    all.shuffle(&mut rng);
    all.truncate(n);
    Ok(all)
}

pub fn generate_synthetic_dataset(n: usize, seed: u64) -> Result<Manifest> {
    let specs = generate_synthetic_specs(n, seed)?;
    let pairs = specs
        .iter()
        .enumerate()
        .map(|(i, s)| ImageTextPair {
            image_id: format!("shape-{i:04}"),
            image: ImageRef::Inline(s.render()),
            caption: s.caption(),
            source: "synthetic".into(),
            similarity: None,
        })
        .collect();
    Ok(Manifest::new(
        pairs,
        vec![Provenance::Synthetic { n, seed }],
    ))
}

/// Reads colour, shape and position back from a rendered image.
pub fn describe_shape_image(image: &ImageTensor) -> Option<ShapeSpec> {
    if image.channels() != 3 {
        return None;
    }
    let (h, w) = (image.height(), image.width());
    let mut count = 0usize;
    let mut sum = [0.0f64; 3];
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    let (mut sx, mut sy) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let px = [image.get(0, y, x), image.get(1, y, x), image.get(2, y, x)];
            if px.iter().all(|&v| v <= 0.1) {
                continue;
            }
            count += 1;
            for c in 0..3 {
                sum[c] += px[c];
            }
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            sx += x as f64 + 0.5;
            sy += y as f64 + 0.5;
        }
    }
    if count == 0 {
        return None;
    }
    let n = count as f64;
    let mean = sum.map(|s| s / n);
    let color = (0..COLORS.len())
        .min_by(|&a, &b| {
            let d = |i: usize| {
                COLORS[i]
                    .1
                    .iter()
                    .zip(mean)
                    .map(|(&c, m)| (f64::from(c) / 255.0 - m).powi(2))
                    .sum::<f64>()
            };
            d(a).total_cmp(&d(b))
        })
        .expect("palette is non-empty");

    let scale = IMAGE_SIZE as f64 / w.max(h) as f64;
    let (cx, cy) = (sx / n * scale, sy / n * scale);
    let position = *POSITIONS
        .iter()
        .min_by(|a, b| {
            let d = |p: &Position| {
                let (px, py) = p.center();
                (px as f64 - cx).powi(2) + (py as f64 - cy).powi(2)
            };
            d(a).total_cmp(&d(b))
        })
        .expect("positions are non-empty");

    let (bw, bh) = (x1 - x0 + 1, y1 - y0 + 1);
    let fill = n / (bw * bh) as f64;
    let bottom_filled = (x0..=x1)
        .filter(|&x| (0..3).any(|c| image.get(c, y1, x) > 0.1))
        .count() as f64
        / bw as f64;
    let shape = if fill >= 0.95 {
        Shape::Square
    } else if fill >= 0.7 {
        Shape::Circle
    } else if bottom_filled >= 0.8 {
        Shape::Triangle
    } else {
        Shape::Cross
    };
    Some(ShapeSpec {
        color,
        shape,
        position,
    })
}
