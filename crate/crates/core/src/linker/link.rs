use super::{Detection, Tracklet, Tube};
use crate::error::{Error, Result};

/// Both ends of a tracklet must overlap the detections by more than this.
pub const TRACK_LINK_IOU: f64 = 0.5;

/// `true` when `tracklet` connects `di` to `dj`: its start box overlaps `di`
/// and its regressed box overlaps `dj`, each with IoU above [`TRACK_LINK_IOU`].
pub fn track_links(di: &Detection, dj: &Detection, tracklet: &Tracklet) -> bool {
    di.bbox.iou_unchecked(&tracklet.box_t) > TRACK_LINK_IOU
        && dj.bbox.iou_unchecked(&tracklet.box_next) > TRACK_LINK_IOU
}

/// Class-wise linking score `p_i + p_j + ψ` for one tracklet.
pub fn pair_score(di: &Detection, dj: &Detection, tracklet: &Tracklet, class: usize) -> Result<f64> {
    if di.frame != tracklet.frame || dj.frame != tracklet.frame + tracklet.stride {
        return Err(Error::InvalidArgument(format!(
            "detections at frames {} and {} do not match tracklet {} -> {}",
            di.frame,
            dj.frame,
            tracklet.frame,
            tracklet.frame + tracklet.stride
        )));
    }
    let psi = if track_links(di, dj, tracklet) { 1.0 } else { 0.0 };
    Ok(di.score(class) + dj.score(class) + psi)
}

/// Pair scores between consecutive processed frames; `ψ` is 1 if any
/// tracklet of the pair connects the two detections.
fn transition_scores(a: &[Detection], b: &[Detection], tracklets: &[Tracklet], class: usize) -> Vec<Vec<f64>> {
    // detections reached by each tracklet end, computed once per tracklet
    let starts: Vec<Vec<bool>> = tracklets
        .iter()
        .map(|t| a.iter().map(|d| d.bbox.iou_unchecked(&t.box_t) > TRACK_LINK_IOU).collect())
        .collect();
    let ends: Vec<Vec<bool>> = tracklets
        .iter()
        .map(|t| b.iter().map(|d| d.bbox.iou_unchecked(&t.box_next) > TRACK_LINK_IOU).collect())
        .collect();
    a.iter()
        .enumerate()
        .map(|(i, di)| {
            b.iter()
                .enumerate()
                .map(|(j, dj)| {
                    let linked = (0..tracklets.len()).any(|t| starts[t][i] && ends[t][j]);
                    di.score(class) + dj.score(class) + if linked { 1.0 } else { 0.0 }
                })
                .collect()
        })
        .collect()
}

/// Exact maximization over paths through the alive detections.
///
/// Runs the recursion from the last frame backwards so that the forward
/// read-out can pick the lowest index among equally good continuations,
/// which yields the lexicographically first optimal path.
fn best_path(
    frames: &[Vec<Detection>],
    transitions: &[Vec<Vec<f64>>],
    alive: &[Vec<bool>],
    class: usize,
    normalize: bool,
) -> Option<(Vec<usize>, f64)> {
    let t_len = frames.len();
    if t_len == 0 || alive.iter().any(|a| !a.contains(&true)) {
        return None;
    }
    if t_len == 1 {
        // nothing to link: the best single detection
        let mut best: Option<(usize, f64)> = None;
        for (i, d) in frames[0].iter().enumerate().filter(|(i, _)| alive[0][*i]) {
            if best.is_none_or(|(_, v)| d.score(class) > v) {
                best = Some((i, d.score(class)));
            }
        }
        return best.map(|(i, v)| (vec![i], v));
    }
    // value[k][i]: best sum of transitions from frame k onwards starting at i
    let mut value: Vec<Vec<f64>> = frames.iter().map(|f| vec![f64::NEG_INFINITY; f.len()]).collect();
    for (i, v) in value[t_len - 1].iter_mut().enumerate() {
        if alive[t_len - 1][i] {
            *v = 0.0;
        }
    }
    for k in (0..t_len - 1).rev() {
        for i in 0..frames[k].len() {
            if !alive[k][i] {
                continue;
            }
            let mut best = f64::NEG_INFINITY;
            for j in 0..frames[k + 1].len() {
                if alive[k + 1][j] {
                    best = best.max(transitions[k][i][j] + value[k + 1][j]);
                }
            }
            value[k][i] = best;
        }
    }
    let mut path = Vec::with_capacity(t_len);
    let mut cur = first_max(&value[0], &alive[0])?;
    let total = value[0][cur];
    path.push(cur);
    for k in 0..t_len - 1 {
        let target = value[k][cur];
        cur = (0..frames[k + 1].len())
            .find(|&j| alive[k + 1][j] && transitions[k][cur][j] + value[k + 1][j] == target)
            .expect("a continuation attains the recorded maximum");
        path.push(cur);
    }
    let score = if normalize { total / t_len as f64 } else { total };
    Some((path, score))
}

fn first_max(values: &[f64], alive: &[bool]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        if alive[i] && best.is_none_or(|b| *v > values[b]) {
            best = Some(i);
        }
    }
    best
}

fn check_inputs(frames: &[Vec<Detection>], tracklets: &[Vec<Tracklet>]) -> Result<()> {
    if !frames.is_empty() && tracklets.len() != frames.len() - 1 && !tracklets.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} tracklet sets for {} processed frames",
            tracklets.len(),
            frames.len()
        )));
    }
    Ok(())
}

fn all_transitions(frames: &[Vec<Detection>], tracklets: &[Vec<Tracklet>], class: usize) -> Vec<Vec<Vec<f64>>> {
    (0..frames.len().saturating_sub(1))
        .map(|k| {
            let t = tracklets.get(k).map(Vec::as_slice).unwrap_or(&[]);
            transition_scores(&frames[k], &frames[k + 1], t, class)
        })
        .collect()
}

fn make_tube(frames: &[Vec<Detection>], path: Vec<usize>, score: f64, class: usize) -> Tube {
    Tube {
        class,
        detections: path.iter().enumerate().map(|(k, &i)| frames[k][i].clone()).collect(),
        indices: path,
        score,
    }
}

pub(crate) fn viterbi_link_with(
    frames: &[Vec<Detection>],
    tracklets: &[Vec<Tracklet>],
    class: usize,
    normalize: bool,
) -> Result<Tube> {
    check_inputs(frames, tracklets)?;
    if let Some(frame) = frames.iter().position(Vec::is_empty) {
        return Err(Error::NoPath { frame });
    }
    if frames.is_empty() {
        return Err(Error::NoPath { frame: 0 });
    }
    let transitions = all_transitions(frames, tracklets, class);
    let alive: Vec<Vec<bool>> = frames.iter().map(|f| vec![true; f.len()]).collect();
    let (path, score) = best_path(frames, &transitions, &alive, class, normalize)
        .ok_or(Error::NoPath { frame: 0 })?;
    Ok(make_tube(frames, path, score, class))
}

/// Highest-scoring chain of one detection per processed frame.
///
/// `tracklets[k]` connects `frames[k]` to `frames[k + 1]`; an empty slice
/// means no tracklets at all. The objective is the mean over the video of
/// the linking scores along the path. Ties go to the lexicographically first
/// path. A single processed frame yields its best detection.
pub fn viterbi_link(frames: &[Vec<Detection>], tracklets: &[Vec<Tracklet>], class: usize) -> Result<Tube> {
    viterbi_link_with(frames, tracklets, class, true)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtractConfig {
    pub max_tubes: usize,
    /// Stop once the best remaining path's mean class probability drops below this.
    pub min_mean_prob: f64,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        ExtractConfig {
            max_tubes: 20,
            min_mean_prob: 1e-3,
        }
    }
}

/// Repeated [`viterbi_link`], removing each tube's detections before the next search.
pub fn extract_tubes(
    frames: &[Vec<Detection>],
    tracklets: &[Vec<Tracklet>],
    class: usize,
    cfg: &ExtractConfig,
) -> Result<Vec<Tube>> {
    check_inputs(frames, tracklets)?;
    if cfg.max_tubes == 0 {
        return Err(Error::InvalidArgument("max_tubes must be >= 1".into()));
    }
    let transitions = all_transitions(frames, tracklets, class);
    let mut alive: Vec<Vec<bool>> = frames.iter().map(|f| vec![true; f.len()]).collect();
    let mut tubes = Vec::new();
    while tubes.len() < cfg.max_tubes {
        let Some((path, score)) = best_path(frames, &transitions, &alive, class, true) else {
            break;
        };
        let mean_prob = path
            .iter()
            .enumerate()
            .map(|(k, &i)| frames[k][i].score(class))
            .sum::<f64>()
            / path.len() as f64;
        if mean_prob < cfg.min_mean_prob {
            break;
        }
        for (k, &i) in path.iter().enumerate() {
            alive[k][i] = false;
        }
        tubes.push(make_tube(frames, path, score, class));
    }
    Ok(tubes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{BBox, TrackDelta};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn det(frame: usize, x: f64, p: f64) -> Detection {
        Detection::new(frame, BBox::new(x, 10.0, 8.0, 8.0), vec![1.0 - p, p])
    }

    fn still(frame: usize, x: f64) -> Tracklet {
        Tracklet::from_delta(frame, 1, BBox::new(x, 10.0, 8.0, 8.0), TrackDelta::ZERO).unwrap()
    }

    #[test]
    fn pair_score_fixtures() {
        let (a, b) = (det(0, 10.0, 0.9), det(1, 10.0, 0.8));
        assert!((pair_score(&a, &b, &still(0, 10.0), 1).unwrap() - 2.7).abs() < 1e-12);
        assert!((pair_score(&a, &b, &still(0, 100.0), 1).unwrap() - 1.7).abs() < 1e-12);
        let (z0, z1) = (det(0, 10.0, 0.0), det(1, 10.0, 0.0));
        assert_eq!(pair_score(&z0, &z1, &still(0, 10.0), 1).unwrap(), 1.0);
        assert!(pair_score(&a, &det(2, 10.0, 0.8), &still(0, 10.0), 1).is_err());
    }

    #[test]
    fn psi_needs_both_ends() {
        let (a, b) = (det(0, 10.0, 0.5), det(1, 30.0, 0.5));
        // start matches a, regressed end does not reach b
        assert!(!track_links(&a, &b, &still(0, 10.0)));
        let moving = Tracklet::from_delta(0, 1, a.bbox, TrackDelta::new(2.5, 0.0, 0.0, 0.0)).unwrap();
        assert!(track_links(&a, &b, &moving));
    }

    #[test]
    fn unique_path() {
        let frames = vec![vec![det(0, 1.0, 0.3)], vec![det(1, 2.0, 0.4)], vec![det(2, 3.0, 0.5)]];
        let tube = viterbi_link(&frames, &[], 1).unwrap();
        assert_eq!(tube.indices, vec![0, 0, 0]);
        assert!((tube.score - (0.7 + 0.9) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_frame_has_no_path() {
        let frames = vec![vec![det(0, 1.0, 0.3)], vec![]];
        assert!(matches!(viterbi_link(&frames, &[], 1), Err(Error::NoPath { frame: 1 })));
        assert!(matches!(viterbi_link(&[], &[], 1), Err(Error::NoPath { .. })));
    }

    #[test]
    fn beats_greedy() {
        // greedy takes 0.9 at frame 0, but index 1 links into a strong chain
        let frames = vec![
            vec![det(0, 10.0, 0.9), det(0, 50.0, 0.8)],
            vec![det(1, 10.0, 0.1), det(1, 50.0, 0.7)],
            vec![det(2, 10.0, 0.1), det(2, 50.0, 0.7)],
        ];
        let tracklets = vec![vec![still(0, 50.0)], vec![still(1, 50.0)]];
        let tube = viterbi_link(&frames, &tracklets, 1).unwrap();
        assert_eq!(tube.indices, vec![1, 1, 1]);
        let (best, all) = brute_force(&frames, &tracklets, 1);
        assert_eq!(all.len(), 8);
        assert_eq!(tube.score, best);
    }

    #[test]
    fn ties_pick_first_indices() {
        let frames: Vec<Vec<Detection>> = (0..4).map(|t| vec![det(t, 1.0, 0.5), det(t, 40.0, 0.5), det(t, 80.0, 0.5)]).collect();
        let tube = viterbi_link(&frames, &[], 1).unwrap();
        assert_eq!(tube.indices, vec![0, 0, 0, 0]);
    }

    #[test]
    fn single_frame_takes_best_detection() {
        let frames = vec![vec![det(0, 1.0, 0.2), det(0, 30.0, 0.6)]];
        let tube = viterbi_link(&frames, &[], 1).unwrap();
        assert_eq!(tube.indices, vec![1]);
    }

    /// Right-to-left sum of linking scores along every path; returns the max
    /// normalized value and all normalized values.
    fn brute_force(frames: &[Vec<Detection>], tracklets: &[Vec<Tracklet>], class: usize) -> (f64, Vec<f64>) {
        let t_len = frames.len();
        let mut values = Vec::new();
        let total: usize = frames.iter().map(Vec::len).product();
        for code in 0..total {
            let mut rem = code;
            let path: Vec<usize> = frames
                .iter()
                .map(|f| {
                    let i = rem % f.len();
                    rem /= f.len();
                    i
                })
                .collect();
            let mut acc = 0.0;
            for k in (0..t_len - 1).rev() {
                let (di, dj) = (&frames[k][path[k]], &frames[k + 1][path[k + 1]]);
                let linked = tracklets.get(k).is_some_and(|ts| ts.iter().any(|t| track_links(di, dj, t)));
                acc += di.score(class) + dj.score(class) + if linked { 1.0 } else { 0.0 };
            }
            values.push(acc / t_len as f64);
        }
        let best = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (best, values)
    }

    fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<Vec<Detection>>, Vec<Vec<Tracklet>>) {
        let t_len = rng.random_range(2..=5);
        let frames: Vec<Vec<Detection>> = (0..t_len)
            .map(|t| {
                (0..rng.random_range(1..=4))
                    .map(|_| det(t, rng.random_range(0..4) as f64 * 12.0, rng.random_range(0.0..1.0)))
                    .collect()
            })
            .collect();
        let tracklets = (0..t_len - 1)
            .map(|t| (0..rng.random_range(0..3)).map(|_| still(t, rng.random_range(0..4) as f64 * 12.0)).collect())
            .collect();
        (frames, tracklets)
    }

    #[test]
    fn dp_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            let (frames, tracklets) = random_instance(&mut rng);
            let tube = viterbi_link(&frames, &tracklets, 1).unwrap();
            let (best, _) = brute_force(&frames, &tracklets, 1);
            assert_eq!(tube.score, best);
        }
    }

    #[test]
    fn normalization_does_not_change_the_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let (frames, tracklets) = random_instance(&mut rng);
            let a = viterbi_link_with(&frames, &tracklets, 1, true).unwrap();
            let b = viterbi_link_with(&frames, &tracklets, 1, false).unwrap();
            assert_eq!(a.indices, b.indices);
        }
    }

    #[test]
    fn extraction_is_disjoint_and_exhaustive() {
        let frames: Vec<Vec<Detection>> = (0..3).map(|t| vec![det(t, 10.0, 0.9), det(t, 50.0, 0.4)]).collect();
        let tubes = extract_tubes(&frames, &[], 1, &ExtractConfig { max_tubes: 2, ..Default::default() }).unwrap();
        assert_eq!(tubes.len(), 2);
        assert_eq!(tubes[0].indices, vec![0, 0, 0]);
        assert_eq!(tubes[1].indices, vec![1, 1, 1]);

        let one = extract_tubes(&frames, &[], 1, &ExtractConfig { max_tubes: 1, ..Default::default() }).unwrap();
        assert_eq!(one, vec![viterbi_link(&frames, &[], 1).unwrap()]);
    }

    #[test]
    fn extraction_stops_when_a_frame_runs_dry() {
        let frames = vec![vec![det(0, 10.0, 0.9), det(0, 50.0, 0.4)], vec![det(1, 10.0, 0.9)]];
        let tubes = extract_tubes(&frames, &[], 1, &ExtractConfig::default()).unwrap();
        assert_eq!(tubes.len(), 1);
    }

    #[test]
    fn extraction_stops_on_negligible_paths() {
        let frames: Vec<Vec<Detection>> = (0..3).map(|t| vec![det(t, 10.0, 0.9), det(t, 50.0, 1e-5)]).collect();
        let tubes = extract_tubes(&frames, &[], 1, &ExtractConfig::default()).unwrap();
        assert_eq!(tubes.len(), 1);
    }

    #[test]
    fn random_extraction_never_reuses_detections() {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        for _ in 0..100 {
            let (frames, tracklets) = random_instance(&mut rng);
            let tubes = extract_tubes(&frames, &tracklets, 1, &ExtractConfig::default()).unwrap();
            let mut used = std::collections::HashSet::new();
            for tube in &tubes {
                assert_eq!(tube.len(), frames.len());
                for (k, &i) in tube.indices.iter().enumerate() {
                    assert!(used.insert((k, i)));
                }
            }
        }
    }
}
