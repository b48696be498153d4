//! Bundled datasets.

use nalgebra::DVector;

use crate::model::{Dataset, Location};

const SAMPLE20_CSV: &str = include_str!("../data/sample20.csv");

/// 20 observations on `[0, 1]` at `s_j = j/19`, constant mean.
pub fn sample20() -> Dataset {
    let mut locs = Vec::new();
    let mut ys = Vec::new();
    for line in SAMPLE20_CSV.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let (s, y) = line.split_once(',').expect("two columns");
        locs.push(Location::from(s.parse::<f64>().expect("location")));
        ys.push(y.parse::<f64>().expect("response"));
    }
    Dataset::with_constant_mean(locs, DVector::from_vec(ys)).expect("bundled data is valid")
}
