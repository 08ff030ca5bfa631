use super::{DataError, VideoRecord};
use crate::rng::SplitMix64;

const SPLIT_STREAM: u64 = 0x5350_4c49;

/// Split sizes: floors of `n * f`, remainder handed out by largest
/// fractional part (earlier split wins ties).
fn split_sizes(n: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes = [0usize; 3];
    for (s, e) in sizes.iter_mut().zip(&exact) {
        *s = e.floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    let mut remaining = n - sizes.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        sizes[i] += 1;
        remaining -= 1;
    }
    sizes
}

/// `(train, val, test)`.
pub type Splits = (Vec<VideoRecord>, Vec<VideoRecord>, Vec<VideoRecord>);

/// Seeded shuffle into disjoint (train, val, test) lists.
pub fn split(records: Vec<VideoRecord>, fractions: [f64; 3], seed: u64) -> Result<Splits, DataError> {
    if records.is_empty() {
        return Err(DataError::Invalid("split: empty input".into()));
    }
    if fractions.iter().any(|f| f.is_nan() || *f <= 0.0 || !f.is_finite()) {
        return Err(DataError::Invalid(format!("split: fractions must be positive, got {fractions:?}")));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(DataError::Invalid(format!("split: fractions sum to {total}, not 1")));
    }
    let sizes = split_sizes(records.len(), &fractions);
    let mut order: Vec<usize> = (0..records.len()).collect();
    SplitMix64::stream(seed, SPLIT_STREAM).shuffle(&mut order);

    let mut slots: Vec<Option<VideoRecord>> = records.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| idx.iter().map(|&i| slots[i].take().unwrap()).collect::<Vec<_>>();
    let train = take(&order[..sizes[0]]);
    let val = take(&order[sizes[0]..sizes[0] + sizes[1]]);
    let test = take(&order[sizes[0] + sizes[1]..]);
    Ok((train, val, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn recs(n: usize) -> Vec<VideoRecord> {
        (0..n).map(|i| VideoRecord::new(format!("v{i}"), vec![0], vec![i as f32, 0.0], 2).unwrap()).collect()
    }

    #[test]
    fn sizes_follow_fractions() {
        let (a, b, c) = split(recs(10), [0.7, 0.2, 0.1], 1).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (7, 2, 1));
        assert_eq!(split_sizes(11, &[0.5, 0.25, 0.25]), [5, 3, 3]);
        assert_eq!(split_sizes(2, &[0.4, 0.3, 0.3]), [1, 1, 0]);
    }

    #[test]
    fn deterministic_and_disjoint() {
        let x = split(recs(50), [0.6, 0.2, 0.2], 9).unwrap();
        let y = split(recs(50), [0.6, 0.2, 0.2], 9).unwrap();
        assert_eq!(x, y);
        let mut ids: Vec<String> = x.0.iter().chain(&x.1).chain(&x.2).map(|r| r.id.clone()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 50);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(split(recs(10), [0.5, 0.5, 0.0], 1).is_err());
        assert!(split(recs(10), [0.5, 0.4, 0.2], 1).is_err());
        assert!(split(Vec::new(), [0.7, 0.2, 0.1], 1).is_err());
    }
}
