//! Belief masses over the frame {F, O} and grids of them.

use gridcast_tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Denominators at or below this count as total conflict.
pub const CONFLICT_EPS: f64 = 1e-12;
/// Classification treats masses closer than this as tied.
pub const TIE_EPS: f64 = 1e-12;

/// Masses on {O} and {F}; the remainder sits on {F, O}.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Mass {
    pub o: f64,
    pub f: f64,
}

impl Mass {
    pub const VACUOUS: Mass = Mass { o: 0.0, f: 0.0 };

    /// Checked constructor.
    pub fn new(o: f64, f: f64) -> Result<Self> {
        let m = Mass { o, f };
        if !m.is_valid(1e-9) {
            return Err(Error::config(format!("masses O={o}, F={f} violate closure")));
        }
        Ok(m)
    }

    /// Mass on {F, O}.
    pub fn unknown(self) -> f64 {
        1.0 - self.o - self.f
    }

    pub fn is_valid(self, tol: f64) -> bool {
        self.o.is_finite()
            && self.f.is_finite()
            && self.o >= -tol
            && self.f >= -tol
            && self.o + self.f <= 1.0 + tol
    }
}

/// Dempster's rule of combination.
pub fn combine(a: Mass, b: Mass) -> Result<Mass> {
    let (ua, ub) = (a.unknown(), b.unknown());
    let conflict = a.o * b.f + a.f * b.o;
    let denom = 1.0 - conflict;
    if denom <= CONFLICT_EPS {
        return Err(Error::TotalConflict);
    }
    let o = a.o * b.o + a.o * ub + ua * b.o;
    let f = a.f * b.f + a.f * ub + ua * b.f;
    Ok(Mass {
        o: o / denom,
        f: f / denom,
    })
}

/// Information aging: both singleton masses decay by `alpha`.
pub fn age(m: Mass, alpha: f64) -> Mass {
    Mass {
        o: (alpha * m.o).min(1.0),
        f: (alpha * m.f).min(1.0),
    }
}

pub fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("aging factor {alpha} must lie in (0, 1]")))
    }
}

/// Pignistic probability of occupancy, `m(O) + m({F,O})/2`.
pub fn pignistic(m: Mass) -> f64 {
    m.o + 0.5 * m.unknown()
}

/// Pignistic probability of free space.
pub fn pignistic_free(m: Mass) -> f64 {
    m.f + 0.5 * m.unknown()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellClass {
    Occupied,
    Free,
    Unknown,
}

impl CellClass {
    pub const ALL: [CellClass; 3] = [CellClass::Occupied, CellClass::Free, CellClass::Unknown];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Largest of `m(O)`, `m(F)`, `m({F,O})`; ties go to unknown, then occupied.
pub fn classify(m: Mass) -> CellClass {
    let u = m.unknown();
    let best = m.o.max(m.f).max(u);
    if u >= best - TIE_EPS {
        CellClass::Unknown
    } else if m.o >= best - TIE_EPS {
        CellClass::Occupied
    } else {
        CellClass::Free
    }
}

/// Class labels on an `h × w` grid, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassGrid {
    pub h: usize,
    pub w: usize,
    pub cells: Vec<CellClass>,
}

impl ClassGrid {
    pub fn new(h: usize, w: usize, cells: Vec<CellClass>) -> Result<Self> {
        if cells.len() != h * w {
            return Err(Error::shape(format!("{} labels for a {h}×{w} grid", cells.len())));
        }
        Ok(ClassGrid { h, w, cells })
    }

    pub fn filled(h: usize, w: usize, class: CellClass) -> Self {
        ClassGrid {
            h,
            w,
            cells: vec![class; h * w],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> CellClass {
        self.cells[r * self.w + c]
    }

    pub fn set(&mut self, r: usize, c: usize, class: CellClass) {
        self.cells[r * self.w + c] = class;
    }

    pub fn count(&self, class: CellClass) -> usize {
        self.cells.iter().filter(|&&c| c == class).count()
    }

    /// Labels a `[2, h, w]` mass tensor (occupied plane first).
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[0] != 2 {
            return Err(Error::shape(format!("mass tensor {s:?} is not [2, H, W]")));
        }
        let n = s[1] * s[2];
        let (o, f) = t.data().split_at(n);
        let cells = o
            .iter()
            .zip(f)
            .map(|(&o, &f)| {
                classify(Mass {
                    o: o.to_f64().unwrap_or(0.0),
                    f: f.to_f64().unwrap_or(0.0),
                })
            })
            .collect();
        Ok(ClassGrid { h: s[1], w: s[2], cells })
    }
}

/// Per-cell masses on an ego-centric grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefGrid {
    pub h: usize,
    pub w: usize,
    /// Meters per cell.
    pub resolution: f64,
    pub o: Vec<f64>,
    pub f: Vec<f64>,
}

impl BeliefGrid {
    /// Fully vacuous grid.
    pub fn vacuous(h: usize, w: usize, resolution: f64) -> Self {
        BeliefGrid {
            h,
            w,
            resolution,
            o: vec![0.0; h * w],
            f: vec![0.0; h * w],
        }
    }

    pub fn len(&self) -> usize {
        self.o.len()
    }

    pub fn is_empty(&self) -> bool {
        self.o.is_empty()
    }

    pub fn get(&self, r: usize, c: usize) -> Mass {
        let i = r * self.w + c;
        Mass {
            o: self.o[i],
            f: self.f[i],
        }
    }

    pub fn at(&self, i: usize) -> Mass {
        Mass {
            o: self.o[i],
            f: self.f[i],
        }
    }

    pub fn set(&mut self, r: usize, c: usize, m: Mass) {
        self.put(r * self.w + c, m);
    }

    pub fn put(&mut self, i: usize, m: Mass) {
        self.o[i] = m.o;
        self.f[i] = m.f;
    }

    pub fn age(&mut self, alpha: f64) -> Result<()> {
        check_alpha(alpha)?;
        for i in 0..self.len() {
            let m = age(self.at(i), alpha);
            self.put(i, m);
        }
        Ok(())
    }

    /// Fuses `meas` into `self` cell by cell. Totally conflicting cells are
    /// reset to vacuous; their count is returned.
    pub fn combine(&mut self, meas: &BeliefGrid) -> Result<usize> {
        if (self.h, self.w) != (meas.h, meas.w) {
            return Err(Error::shape(format!(
                "cannot fuse {}×{} grid with {}×{}",
                self.h, self.w, meas.h, meas.w
            )));
        }
        let mut conflicts = 0;
        for i in 0..self.len() {
            let m = match combine(self.at(i), meas.at(i)) {
                Ok(m) => m,
                Err(Error::TotalConflict) => {
                    conflicts += 1;
                    Mass::VACUOUS
                }
                Err(e) => return Err(e),
            };
            self.put(i, m);
        }
        if conflicts > 0 {
            log::warn!("{conflicts} cells in total conflict were reset to vacuous");
        }
        Ok(conflicts)
    }

    pub fn pignistic(&self) -> Vec<f64> {
        (0..self.len()).map(|i| pignistic(self.at(i))).collect()
    }

    pub fn classify(&self) -> ClassGrid {
        ClassGrid {
            h: self.h,
            w: self.w,
            cells: (0..self.len()).map(|i| classify(self.at(i))).collect(),
        }
    }

    /// `[2, h, w]` tensor with the occupied plane first.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self
            .o
            .iter()
            .chain(&self.f)
            .map(|&v| T::from_f64_lossy(v))
            .collect();
        Tensor::from_vec(&[2, self.h, self.w], data).expect("plane sizes match")
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, resolution: f64) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[0] != 2 {
            return Err(Error::shape(format!("mass tensor {s:?} is not [2, H, W]")));
        }
        let n = s[1] * s[2];
        let vals: Vec<f64> = t.data().iter().map(|v| v.to_f64().unwrap_or(0.0)).collect();
        Ok(BeliefGrid {
            h: s[1],
            w: s[2],
            resolution,
            o: vals[..n].to_vec(),
            f: vals[n..].to_vec(),
        })
    }
}
