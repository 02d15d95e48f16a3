//! Image-like value types: frames, sketches, flow fields, point grids and masks.
//!
//! All grids are stored planar (channel-major, then row-major), matching the
//! NCHW layout of the tensor engine, so conversion to a batch-of-one [`Var`] is a copy.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{contract, Error, Result};
use crate::real::Real;

/// Planar `channels × height × width` buffer of `f32`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Grid {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(contract(format!("empty grid {channels}x{height}x{width}")));
        }
        if data.len() != channels * height * width {
            return Err(Error::Shape {
                expected: format!("{} values", channels * height * width),
                got: format!("{} values", data.len()),
            });
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self::new(channels, height, width, vec![value; channels * height * width]).expect("valid fill")
    }

    /// Builds a grid by evaluating `f(channel, y, x)`.
    pub fn from_fn(channels: usize, height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self { channels, height, width, data }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        (self.channels, self.height, self.width) == (other.channels, other.height, other.width)
    }

    pub fn to_var<T: Real>(&self) -> Var<T> {
        Var::new(
            vec![1, self.channels, self.height, self.width],
            self.data.iter().map(|&v| T::lit(v as f64)).collect(),
        )
    }

    /// Extracts batch item `index` of a 4-d tensor.
    pub fn from_var<T: Real>(v: &Var<T>, index: usize) -> Self {
        let (n, c, h, w) = v.dims4();
        assert!(index < n, "batch index {index} out of range {n}");
        let item = c * h * w;
        let data = v.data()[index * item..(index + 1) * item]
            .iter()
            .map(|x| x.as_f64() as f32)
            .collect();
        Self { channels: c, height: h, width: w, data }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

macro_rules! newtype_grid {
    ($(#[$m:meta])* $name:ident, channels = $ch:expr, range = $range:expr) => {
        $(#[$m])*
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        #[serde(try_from = "Grid", into = "Grid")]
        pub struct $name(Grid);

        impl $name {
            pub fn new(grid: Grid) -> Result<Self> {
                let want: Option<usize> = $ch;
                if let Some(want) = want {
                    if grid.channels() != want {
                        return Err(Error::Shape {
                            expected: format!("{} channel(s)", want),
                            got: format!("{} channel(s)", grid.channels()),
                        });
                    }
                }
                let range: Option<(f32, f32)> = $range;
                match range {
                    Some((lo, hi)) => {
                        if let Some(bad) = grid.data().iter().find(|v| !(v.is_finite() && **v >= lo && **v <= hi)) {
                            return Err(contract(format!(
                                concat!(stringify!($name), " value {} outside [{}, {}]"),
                                bad, lo, hi
                            )));
                        }
                    }
                    None => {
                        if !grid.all_finite() {
                            return Err(contract(concat!(stringify!($name), " has non-finite values")));
                        }
                    }
                }
                Ok(Self(grid))
            }

            pub fn grid(&self) -> &Grid {
                &self.0
            }

            pub fn into_grid(self) -> Grid {
                self.0
            }

            pub fn height(&self) -> usize {
                self.0.height()
            }

            pub fn width(&self) -> usize {
                self.0.width()
            }

            pub fn dims(&self) -> (usize, usize) {
                self.0.dims()
            }

            pub fn to_var<T: Real>(&self) -> Var<T> {
                self.0.to_var()
            }
        }

        impl TryFrom<Grid> for $name {
            type Error = Error;
            fn try_from(g: Grid) -> Result<Self> {
                Self::new(g)
            }
        }

        impl From<$name> for Grid {
            fn from(v: $name) -> Grid {
                v.0
            }
        }
    };
}

newtype_grid!(
    /// RGB image with values in `[0, 1]`.
    Frame, channels = Some(3), range = Some((0.0, 1.0))
);
newtype_grid!(
    /// Line drawing in `[0, 1]`: 0 is ink, 1 is blank paper.
    Sketch, channels = Some(1), range = Some((0.0, 1.0))
);
newtype_grid!(
    /// Per-pixel displacement `(dx, dy)` in pixels, +x right, +y down.
    ///
    /// For a flow `f_{a→b}`, the image `b` aligned to time `a` is obtained by
    /// sampling `b` at `p + f_{a→b}(p)`.
    FlowField, channels = Some(2), range = None
);
newtype_grid!(
    /// Pixel coordinates `(x, y)`; the identity grid holds `(j, i)` at row `i`, column `j`.
    PointGrid, channels = Some(2), range = None
);
newtype_grid!(
    /// Soft contour strength in `[0, 1]`, 1 = strong contour.
    ContourMap, channels = Some(1), range = Some((0.0, 1.0))
);
newtype_grid!(
    /// Occlusion score in `[0, 1)`: 0 where the flow round trip is consistent.
    OcclusionMask, channels = Some(1), range = Some((0.0, 1.0))
);
newtype_grid!(
    /// Soft blending weight of the frame warped from `I₀`, in `[0, 1]`.
    BlendMask, channels = Some(1), range = Some((0.0, 1.0))
);
newtype_grid!(
    /// Euclidean distance (pixels) to the nearest ground-truth contour pixel.
    DistanceMap, channels = Some(1), range = Some((0.0, f32::MAX))
);

impl Frame {
    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self(Grid::filled(3, height, width, value))
    }

    /// Wraps a tensor item, clamping tiny excursions from arithmetic into `[0, 1]`.
    pub fn from_var_clamped<T: Real>(v: &Var<T>, index: usize) -> Result<Self> {
        Self::new(Grid::from_var(v, index).map(|x| x.clamp(0.0, 1.0)))
    }
}

impl Sketch {
    pub fn blank(height: usize, width: usize) -> Self {
        Self(Grid::filled(1, height, width, 1.0))
    }

    /// Fraction of pixels darker than 0.5.
    pub fn ink_fraction(&self) -> f64 {
        let n = self.0.data().len();
        self.0.data().iter().filter(|&&v| v < 0.5).count() as f64 / n as f64
    }
}

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self(Grid::filled(2, height, width, 0.0))
    }

    pub fn constant(height: usize, width: usize, dx: f32, dy: f32) -> Self {
        Self(Grid::from_fn(2, height, width, |c, _, _| if c == 0 { dx } else { dy }))
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> (f32, f32)) -> Self {
        Self(Grid::from_fn(2, height, width, |c, y, x| {
            let (dx, dy) = f(y, x);
            if c == 0 {
                dx
            } else {
                dy
            }
        }))
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> (f32, f32) {
        (self.0.get(0, y, x), self.0.get(1, y, x))
    }

    pub fn scaled(&self, s: f32) -> Self {
        Self(self.0.map(|v| v * s))
    }

    /// `a·self + b·other`
    pub fn combine(&self, a: f32, other: &FlowField, b: f32) -> Result<Self> {
        if !self.0.same_shape(&other.0) {
            return Err(contract("combine: flow shapes differ"));
        }
        let data = self.0.data().iter().zip(other.0.data()).map(|(&x, &y)| a * x + b * y).collect();
        Self::new(Grid::new(2, self.height(), self.width(), data)?)
    }

    pub fn max_magnitude(&self) -> f32 {
        let n = self.height() * self.width();
        let (dx, dy) = (self.0.plane(0), self.0.plane(1));
        (0..n).map(|i| dx[i].hypot(dy[i])).fold(0.0, f32::max)
    }
}

impl PointGrid {
    pub fn identity(height: usize, width: usize) -> Self {
        Self(Grid::from_fn(2, height, width, |c, y, x| if c == 0 { x as f32 } else { y as f32 }))
    }
}

/// Identity coordinate grid as a constant tensor of shape (n, 2, h, w).
pub fn identity_coords<T: Real>(n: usize, h: usize, w: usize) -> Var<T> {
    let mut data = Vec::with_capacity(n * 2 * h * w);
    for _ in 0..n {
        for c in 0..2 {
            for y in 0..h {
                for x in 0..w {
                    data.push(T::from_usize_lossy(if c == 0 { x } else { y }));
                }
            }
        }
    }
    Var::new(vec![n, 2, h, w], data)
}

/// Checks the minimum-size and pyramid-divisibility invariants of a frame size.
pub fn check_pyramid_size(height: usize, width: usize, levels: usize) -> Result<()> {
    let factor = 1usize << levels.saturating_sub(1);
    if height < 8 || width < 8 {
        return Err(contract(format!("frames must be at least 8x8, got {height}x{width}")));
    }
    if height % factor != 0 || width % factor != 0 {
        return Err(contract(format!(
            "frame size {height}x{width} not divisible by pyramid factor {factor}; pad first"
        )));
    }
    Ok(())
}
