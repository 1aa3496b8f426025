use ndarray::{ArrayView3, Zip};

use crate::error::{Error, Result};

/// `2|P∩G| / (|P| + |G|)`. Both masks empty gives 1, exactly one empty 0.
pub fn volumetric_dice(pred: ArrayView3<u8>, gt: ArrayView3<u8>) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!(
            "mask shapes differ: {:?} vs {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let (mut p, mut g, mut both) = (0u64, 0u64, 0u64);
    Zip::from(&pred).and(&gt).for_each(|&a, &b| {
        let (a, b) = (a != 0, b != 0);
        p += u64::from(a);
        g += u64::from(b);
        both += u64::from(a && b);
    });
    Ok(match (p, g) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ => 2.0 * both as f64 / (p + g) as f64,
    })
}
