pub mod evaluate;
pub mod fuse;
pub mod overfit;
pub mod render;
pub mod selfcheck;
pub mod transfer;
pub mod visualize;

use rht_core::fusion::ScaleTable;
use rht_core::grid::Grid;

/// Input errors exit 1, internal failures exit 2.
pub enum CliError {
    Input(String),
    Internal(String),
}

impl From<rht_core::Error> for CliError {
    fn from(e: rht_core::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

pub fn input_err(message: impl Into<String>) -> CliError {
    CliError::Input(message.into())
}

/// Parse an "HxW" size argument.
pub fn parse_size(s: &str) -> Result<(usize, usize), CliError> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| input_err(format!("size {s:?} must look like 64x64")))?;
    let h = h.trim().parse().map_err(|_| input_err(format!("bad height in {s:?}")))?;
    let w = w.trim().parse().map_err(|_| input_err(format!("bad width in {s:?}")))?;
    if h == 0 || w == 0 {
        return Err(input_err("size must be positive"));
    }
    Ok((h, w))
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ScaleChoice {
    Micro,
    Quarter,
    Full,
}

impl ScaleChoice {
    pub fn table(self) -> ScaleTable {
        match self {
            ScaleChoice::Micro => ScaleTable::micro(),
            ScaleChoice::Quarter => ScaleTable::quarter(),
            ScaleChoice::Full => ScaleTable::full(),
        }
    }
}

/// Load an image and widen grayscale to the three channels the
/// extractors expect.
pub fn load_image_rgb(path: &str) -> Result<Grid, CliError> {
    let g = rht_core::dataio::load_image(path)?;
    if g.c() == 3 {
        return Ok(g);
    }
    if g.c() == 1 {
        let mut out = Grid::zeros(g.h(), g.w(), 3);
        for y in 0..g.h() {
            for x in 0..g.w() {
                let v = g.at(y, x, 0);
                for ch in 0..3 {
                    *out.at_mut(y, x, ch) = v;
                }
            }
        }
        return Ok(out);
    }
    Err(input_err(format!("{path}: expected a 1- or 3-channel image")))
}

/// One machine-parseable line on stdout.
pub fn emit_json(value: serde_json::Value) {
    println!("{value}");
}
