//! Coarse population raster and its ESRI ASCII grid representation.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const DEFAULT_NODATA: f64 = -9999.0;

/// Axis-aligned raster with square cells. `values` is row-major with row 0
/// at the north edge (ESRI ASCII order); `(xll, yll)` is the lower-left
/// corner of the whole raster.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseRaster {
    pub xll: f64,
    pub yll: f64,
    pub cell_size: f64,
    pub nrows: usize,
    pub ncols: usize,
    pub values: Vec<f64>,
    pub nodata: f64,
}

impl CoarseRaster {
    pub fn new(
        xll: f64,
        yll: f64,
        cell_size: f64,
        nrows: usize,
        ncols: usize,
        values: Vec<f64>,
        nodata: f64,
    ) -> Result<Self> {
        if nrows == 0 || ncols == 0 {
            return Err(Error::Raster("nrows and ncols must be positive".into()));
        }
        if !(cell_size.is_finite() && cell_size > 0.0) {
            return Err(Error::Raster(format!("invalid cell size {cell_size}")));
        }
        if values.len() != nrows * ncols {
            return Err(Error::Raster(format!(
                "{} values for a {nrows}x{ncols} grid",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Raster(format!("non-finite value {v}")));
        }
        Ok(Self {
            xll,
            yll,
            cell_size,
            nrows,
            ncols,
            values,
            nodata,
        })
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.ncols + col]
    }

    #[inline]
    pub fn is_nodata(&self, v: f64) -> bool {
        v == self.nodata
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        let x = self.xll + (col as f64 + 0.5) * self.cell_size;
        let y = self.yll + ((self.nrows - 1 - row) as f64 + 0.5) * self.cell_size;
        (x, y)
    }

    pub fn cell_area(&self) -> f64 {
        self.cell_size * self.cell_size
    }

    pub fn nodata_count(&self) -> usize {
        self.values.iter().filter(|&&v| self.is_nodata(v)).count()
    }

    /// Sum of all valid cells.
    pub fn total(&self) -> f64 {
        self.values.iter().filter(|&&v| !self.is_nodata(v)).sum()
    }

    /// Copy with every no-data cell replaced by `fill`.
    pub fn filled(&self, fill: f64) -> Self {
        let mut out = self.clone();
        for v in &mut out.values {
            if *v == self.nodata {
                *v = fill;
            }
        }
        out
    }

    pub fn parse_ascii(text: &str) -> Result<Self> {
        let mut ncols = None;
        let mut nrows = None;
        let mut xll = None;
        let mut yll = None;
        let mut centered = (false, false);
        let mut cell_size = None;
        let mut nodata = DEFAULT_NODATA;

        let mut lines = text.lines().enumerate().peekable();
        while let Some(&(lineno, line)) = lines.peek() {
            let mut parts = line.split_whitespace();
            let Some(key) = parts.next() else {
                lines.next();
                continue;
            };
            if !key.starts_with(|c: char| c.is_ascii_alphabetic()) {
                break;
            }
            let value = parts.next().ok_or_else(|| Error::Parse {
                line: lineno + 1,
                message: format!("header key {key} without value"),
            })?;
            let num = |v: &str| -> Result<f64> {
                v.parse::<f64>().map_err(|_| Error::Parse {
                    line: lineno + 1,
                    message: format!("bad header value {v:?}"),
                })
            };
            match key.to_ascii_lowercase().as_str() {
                "ncols" => ncols = Some(num(value)? as usize),
                "nrows" => nrows = Some(num(value)? as usize),
                "xllcorner" => xll = Some(num(value)?),
                "yllcorner" => yll = Some(num(value)?),
                "xllcenter" => {
                    xll = Some(num(value)?);
                    centered.0 = true;
                }
                "yllcenter" => {
                    yll = Some(num(value)?);
                    centered.1 = true;
                }
                "cellsize" => cell_size = Some(num(value)?),
                "nodata_value" => nodata = num(value)?,
                other => {
                    return Err(Error::Parse {
                        line: lineno + 1,
                        message: format!("unknown header key {other}"),
                    })
                }
            }
            lines.next();
        }

        let missing = |k: &str| Error::Raster(format!("missing header key {k}"));
        let ncols = ncols.ok_or_else(|| missing("ncols"))?;
        let nrows = nrows.ok_or_else(|| missing("nrows"))?;
        let cell_size = cell_size.ok_or_else(|| missing("cellsize"))?;
        let mut xll = xll.ok_or_else(|| missing("xllcorner"))?;
        let mut yll = yll.ok_or_else(|| missing("yllcorner"))?;
        if centered.0 {
            xll -= 0.5 * cell_size;
        }
        if centered.1 {
            yll -= 0.5 * cell_size;
        }

        let mut values = Vec::with_capacity(nrows * ncols);
        for (lineno, line) in lines {
            for tok in line.split_whitespace() {
                let v: f64 = tok.parse().map_err(|_| Error::Parse {
                    line: lineno + 1,
                    message: format!("bad raster value {tok:?}"),
                })?;
                values.push(v);
            }
        }
        Self::new(xll, yll, cell_size, nrows, ncols, values, nodata)
    }

    pub fn to_ascii(&self) -> String {
        let mut s = String::new();
        writeln!(s, "ncols {}", self.ncols).unwrap();
        writeln!(s, "nrows {}", self.nrows).unwrap();
        writeln!(s, "xllcorner {}", self.xll).unwrap();
        writeln!(s, "yllcorner {}", self.yll).unwrap();
        writeln!(s, "cellsize {}", self.cell_size).unwrap();
        writeln!(s, "NODATA_value {}", self.nodata).unwrap();
        for row in self.values.chunks(self.ncols) {
            let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse_ascii(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ascii())?;
        Ok(())
    }
}
