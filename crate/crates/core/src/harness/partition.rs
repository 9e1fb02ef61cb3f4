//! Subimage grids and train/test splits.

use serde::{Deserialize, Serialize};

use super::ImagePair;
use crate::error::{Error, Result};
use crate::image::GrayImage;

/// A `grid_rows x grid_cols` tiling with each tile assigned to train or test.
/// Tiles are numbered row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub train_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
}

impl Default for PartitionPlan {
    /// 3x4 grid, last column held out: 9 train and 3 test tiles.
    fn default() -> Self {
        Self::last_columns(3, 4, 1).expect("valid default grid")
    }
}

impl PartitionPlan {
    /// Holds out `test_ids`; every other tile trains.
    pub fn new(grid_rows: usize, grid_cols: usize, test_ids: Vec<usize>) -> Result<Self> {
        let mut test_ids = test_ids;
        test_ids.sort_unstable();
        test_ids.dedup();
        let train_ids = (0..grid_rows * grid_cols)
            .filter(|i| test_ids.binary_search(i).is_err())
            .collect();
        let plan = Self {
            grid_rows,
            grid_cols,
            train_ids,
            test_ids,
        };
        plan.validate()?;
        Ok(plan)
    }

    /// Holds out the rightmost `test_cols` columns.
    pub fn last_columns(grid_rows: usize, grid_cols: usize, test_cols: usize) -> Result<Self> {
        if test_cols > grid_cols {
            return Err(Error::param(format!("{test_cols} test columns in a {grid_cols}-column grid")));
        }
        let test = (0..grid_rows)
            .flat_map(|r| (grid_cols - test_cols..grid_cols).map(move |c| r * grid_cols + c))
            .collect();
        Self::new(grid_rows, grid_cols, test)
    }

    pub fn tiles(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    /// Train and test ids must be disjoint and together cover every tile once.
    pub fn validate(&self) -> Result<()> {
        if self.grid_rows == 0 || self.grid_cols == 0 {
            return Err(Error::param("grid must have at least one row and column"));
        }
        let mut seen = vec![0u8; self.tiles()];
        for &i in self.train_ids.iter().chain(&self.test_ids) {
            match seen.get_mut(i) {
                Some(s) => *s += 1,
                None => return Err(Error::param(format!("tile {i} outside a {}-tile grid", self.tiles()))),
            }
        }
        if seen.iter().any(|&s| s != 1) {
            return Err(Error::param("train and test tiles must partition the grid exactly"));
        }
        Ok(())
    }
}

/// One aligned tile of a pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SubPair {
    pub pair_id: String,
    /// Row-major tile index in the grid.
    pub index: usize,
    /// `(top, left)` of the HR tile in the aligned HR image.
    pub hr_origin: (usize, usize),
    pub hr: GrayImage,
    pub lr: GrayImage,
}

/// `(start, len)` of `parts` consecutive spans covering `0..len`; the last
/// span absorbs the remainder.
pub fn tile_spans(len: usize, parts: usize) -> Vec<(usize, usize)> {
    let base = len / parts;
    (0..parts)
        .map(|p| {
            let start = p * base;
            let size = if p + 1 == parts { len - start } else { base };
            (start, size)
        })
        .collect()
}

/// Cuts an aligned pair into grid tiles. The grid is laid on the LR image so
/// every HR tile is exactly twice its LR tile.
pub fn partition_pair(pair: &ImagePair, plan: &PartitionPlan) -> Result<(Vec<SubPair>, Vec<SubPair>)> {
    plan.validate()?;
    if pair.registration.is_none() {
        return Err(Error::Registration(format!(
            "pair {} must be registered and cropped before partitioning",
            pair.pair_id
        )));
    }
    let (lw, lh) = pair.lr.dims();
    if pair.hr.dims() != (2 * lw, 2 * lh) {
        return Err(Error::DimensionMismatch(format!(
            "aligned HR {:?} is not twice LR {:?}",
            pair.hr.dims(),
            pair.lr.dims()
        )));
    }
    if lh < plan.grid_rows || lw < plan.grid_cols {
        return Err(Error::param(format!(
            "{lw}x{lh} LR image is too small for a {}x{} grid",
            plan.grid_rows, plan.grid_cols
        )));
    }
    let rows = tile_spans(lh, plan.grid_rows);
    let cols = tile_spans(lw, plan.grid_cols);
    let tile = |index: usize| -> Result<SubPair> {
        let (top, height) = rows[index / plan.grid_cols];
        let (left, width) = cols[index % plan.grid_cols];
        Ok(SubPair {
            pair_id: pair.pair_id.clone(),
            index,
            hr_origin: (2 * top, 2 * left),
            hr: pair.hr.crop(2 * top, 2 * left, 2 * width, 2 * height)?,
            lr: pair.lr.crop(top, left, width, height)?,
        })
    };
    let train = plan.train_ids.iter().map(|&i| tile(i)).collect::<Result<_>>()?;
    let test = plan.test_ids.iter().map(|&i| tile(i)).collect::<Result<_>>()?;
    Ok((train, test))
}

/// Pastes HR tiles back at their origins.
pub fn reassemble_hr(tiles: &[SubPair], width: usize, height: usize) -> Result<GrayImage> {
    let mut out = GrayImage::filled(width, height, 0.0);
    for t in tiles {
        out.paste(&t.hr, t.hr_origin.0, t.hr_origin.1)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registration::GlobalTransform;
    use proptest::prelude::*;

    fn aligned(lw: usize, lh: usize) -> ImagePair {
        let hr = GrayImage::from_fn(2 * lw, 2 * lh, |r, c| ((r * 31 + c * 17) % 251) as f64);
        let lr = GrayImage::from_fn(lw, lh, |r, c| ((r * 7 + c * 3) % 97) as f64);
        ImagePair {
            pair_id: "p".into(),
            hr,
            lr,
            registration: Some(GlobalTransform::identity()),
        }
    }

    #[test]
    fn default_plan_is_nine_three() {
        let plan = PartitionPlan::default();
        assert_eq!((plan.grid_rows, plan.grid_cols), (3, 4));
        assert_eq!(plan.train_ids.len(), 9);
        assert_eq!(plan.test_ids, vec![3, 7, 11]);
    }

    #[test]
    fn paper_sized_overlap() {
        let pair = aligned(640, 472);
        let (train, test) = partition_pair(&pair, &PartitionPlan::default()).unwrap();
        assert_eq!((train.len(), test.len()), (9, 3));
        for t in train.iter().chain(&test) {
            assert_eq!(t.hr.width(), 320);
            let expected_h = if t.index / 4 == 2 { 316 } else { 314 };
            assert_eq!(t.hr.height(), expected_h);
            assert_eq!(t.hr.dims(), (2 * t.lr.width(), 2 * t.lr.height()));
        }
    }

    #[test]
    fn toy_two_by_two() {
        let pair = aligned(2, 2);
        let plan = PartitionPlan::new(2, 2, vec![3]).unwrap();
        let (train, test) = partition_pair(&pair, &plan).unwrap();
        let all: Vec<SubPair> = train.into_iter().chain(test).collect();
        assert_eq!(all.len(), 4);
        for t in &all {
            assert_eq!(t.hr.dims(), (2, 2));
            assert_eq!(t.lr.dims(), (1, 1));
        }
        assert_eq!(reassemble_hr(&all, 4, 4).unwrap(), pair.hr);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut pair = aligned(8, 8);
        pair.registration = None;
        assert!(partition_pair(&pair, &PartitionPlan::default()).is_err());
        let mut pair = aligned(8, 8);
        pair.hr = GrayImage::filled(15, 16, 0.0);
        assert!(partition_pair(&pair, &PartitionPlan::default()).is_err());
        assert!(partition_pair(&aligned(3, 2), &PartitionPlan::default()).is_err());
        assert!(PartitionPlan::new(2, 2, vec![4]).is_err());
        assert!(PartitionPlan::new(0, 2, vec![]).is_err());
        let overlapping = PartitionPlan {
            grid_rows: 1,
            grid_cols: 2,
            train_ids: vec![0, 1],
            test_ids: vec![1],
        };
        assert!(overlapping.validate().is_err());
    }

    proptest! {
        #[test]
        fn tiles_reassemble_exactly(lw in 4usize..40, lh in 4usize..40, rows in 1usize..4, cols in 1usize..5) {
            let pair = aligned(lw, lh);
            let plan = PartitionPlan::last_columns(rows, cols, 1).unwrap();
            let (train, test) = partition_pair(&pair, &plan).unwrap();
            prop_assert_eq!(train.len() + test.len(), rows * cols);
            let all: Vec<SubPair> = train.into_iter().chain(test).collect();
            let area: usize = all.iter().map(|t| t.hr.width() * t.hr.height()).sum();
            prop_assert_eq!(area, pair.hr.width() * pair.hr.height());
            prop_assert_eq!(reassemble_hr(&all, pair.hr.width(), pair.hr.height()).unwrap(), pair.hr.clone());
            for t in &all {
                let (top, left) = t.hr_origin;
                prop_assert_eq!(&t.lr, &pair.lr.crop(top / 2, left / 2, t.lr.width(), t.lr.height()).unwrap());
            }
        }
    }
}
