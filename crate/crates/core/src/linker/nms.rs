use super::Detection;
use crate::geometry::BBox;

/// IoU threshold for suppressing detector output.
pub const DEFAULT_NMS_IOU: f64 = 0.3;
/// Survivors per image and class.
pub const DEFAULT_KEEP: usize = 25;

/// Greedy NMS over parallel `boxes` / `scores`. Returns `(survivor, cluster)`
/// pairs in descending score order, where `cluster` lists the survivor and
/// every box it suppressed.
pub(crate) fn greedy_clusters(boxes: &[BBox], scores: &[f64], iou_thresh: f64, keep: usize) -> Vec<(usize, Vec<usize>)> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    // stable: equal scores keep input order
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut alive = vec![true; boxes.len()];
    let mut out = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if out.len() >= keep {
            break;
        }
        if !alive[i] {
            continue;
        }
        alive[i] = false;
        let mut members = vec![i];
        for &j in &order[pos + 1..] {
            if alive[j] && boxes[i].iou_unchecked(&boxes[j]) > iou_thresh {
                alive[j] = false;
                members.push(j);
            }
        }
        out.push((i, members));
    }
    out
}

fn clusters(dets: &[Detection], class: usize, iou_thresh: f64, keep: usize) -> Vec<(usize, Vec<usize>)> {
    let boxes: Vec<BBox> = dets.iter().map(|d| d.bbox).collect();
    let scores: Vec<f64> = dets.iter().map(|d| d.score(class)).collect();
    greedy_clusters(&boxes, &scores, iou_thresh, keep)
}

/// Indices of the greedy-NMS survivors before voting, best first.
pub fn nms_indices(dets: &[Detection], class: usize, iou_thresh: f64, keep: usize) -> Vec<usize> {
    clusters(dets, class, iou_thresh, keep)
        .into_iter()
        .map(|(i, _)| i)
        .collect()
}

/// Greedy NMS on the class-`class` scores with score-weighted box voting.
///
/// Each survivor's box is replaced by the score-weighted mean of itself and
/// the boxes it suppressed; its scores are left untouched.
pub fn nms_with_voting(dets: &[Detection], class: usize, iou_thresh: f64, keep: usize) -> Vec<Detection> {
    clusters(dets, class, iou_thresh, keep)
        .into_iter()
        .map(|(i, members)| {
            let total: f64 = members.iter().map(|&m| dets[m].score(class)).sum();
            let mut out = dets[i].clone();
            if total > 0.0 {
                let mut acc = [0.0; 4];
                for &m in &members {
                    let wgt = dets[m].score(class) / total;
                    for (a, v) in acc.iter_mut().zip(dets[m].bbox.to_array()) {
                        *a += wgt * v;
                    }
                }
                out.bbox = BBox::from(acc);
            }
            out
        })
        .collect()
}
