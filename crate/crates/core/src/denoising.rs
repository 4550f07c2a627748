//! The denoising half of the decoder input: noised copies of the ground
//! truth, the attention mask that isolates them, and assembly with the
//! learnable matching queries.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{apply_box_noise, BBox, NoiseConfig};

/// A ground-truth box with its class label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    pub bbox: BBox,
    pub label: usize,
}

impl GtObject {
    pub fn new(bbox: BBox, label: usize) -> Self {
        Self { bbox, label }
    }
}

/// One noised query and the object it must reconstruct.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenoisingQuery {
    pub bbox: BBox,
    /// Label fed to the decoder, possibly flipped.
    pub input_label: usize,
    pub flipped: bool,
    /// Index of the source object; the reconstruction target.
    pub target: usize,
}

/// An independently noised copy of all ground-truth objects.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoisingGroup {
    pub queries: Vec<DenoisingQuery>,
}

/// Flip each label with probability `gamma` to a uniformly chosen other class.
pub fn flip_labels<R: Rng + ?Sized>(
    labels: &[usize],
    gamma: f64,
    n_classes: usize,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<bool>)> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(invalid(format!("flip ratio {gamma} not in [0, 1]")));
    }
    if gamma > 0.0 && n_classes < 2 {
        return Err(invalid("label flipping needs at least two classes"));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(invalid(format!("label {l} out of range for {n_classes} classes")));
    }
    let mut out = Vec::with_capacity(labels.len());
    let mut flags = Vec::with_capacity(labels.len());
    for &label in labels {
        if gamma > 0.0 && rng.gen_bool(gamma) {
            // uniform over the other n_classes - 1 labels
            let mut other = rng.gen_range(0..n_classes - 1);
            if other >= label {
                other += 1;
            }
            out.push(other);
            flags.push(true);
        } else {
            out.push(label);
            flags.push(false);
        }
    }
    Ok((out, flags))
}

/// Build `groups` noised copies of `gts`, noise drawn independently per query.
pub fn make_denoising_groups<R: Rng + ?Sized>(
    gts: &[GtObject],
    groups: usize,
    cfg: &NoiseConfig,
    n_classes: usize,
    rng: &mut R,
) -> Result<Vec<DenoisingGroup>> {
    cfg.validate()?;
    if gts.is_empty() {
        return Ok(Vec::new());
    }
    let labels: Vec<usize> = gts.iter().map(|g| g.label).collect();
    (0..groups)
        .map(|_| {
            let (flipped, flags) = flip_labels(&labels, cfg.gamma, n_classes, rng)?;
            let queries = gts
                .iter()
                .enumerate()
                .map(|(m, gt)| DenoisingQuery {
                    bbox: apply_box_noise(&gt.bbox, cfg, rng),
                    input_label: flipped[m],
                    flipped: flags[m],
                    target: m,
                })
                .collect();
            Ok(DenoisingGroup { queries })
        })
        .collect()
}

/// `W x W` blocking mask; `true` at `(i, j)` means query `i` cannot see query `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    size: usize,
    blocked: Vec<bool>,
}

impl AttentionMask {
    pub fn unblocked(size: usize) -> Self {
        Self {
            size,
            blocked: vec![false; size * size],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn is_blocked(&self, i: usize, j: usize) -> bool {
        self.blocked[i * self.size + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.blocked[i * self.size..(i + 1) * self.size]
    }
}

/// Mask for `groups` denoising groups of `objects` queries followed by
/// `matching` queries.
///
/// Query `i` is blocked from query `j` iff `j` is a denoising query and `i`
/// is not in the same group as `j`. Matching queries therefore never see the
/// denoising part, groups never see each other, and everything else is open.
pub fn build_attention_mask(groups: usize, objects: usize, matching: usize) -> AttentionMask {
    let dn = groups * objects;
    let size = dn + matching;
    let mut mask = AttentionMask::unblocked(size);
    for i in 0..size {
        for j in 0..dn {
            // i / objects >= groups for every matching row
            if i >= dn || i / objects != j / objects {
                mask.blocked[i * size + j] = true;
            }
        }
    }
    mask
}

/// Content source of one decoder query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QueryContent {
    /// Denoising query carrying a (possibly flipped) class label.
    Label(usize),
    /// Matching query carrying the unknown-class embedding.
    Unknown,
}

/// Ordered decoder input: denoising queries (group-major) then matching queries.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryBatch {
    pub groups: usize,
    pub objects: usize,
    pub matching: usize,
    /// Content for every slot, `groups * objects + matching` long.
    pub contents: Vec<QueryContent>,
    /// Noised boxes of the denoising slots, in slot order.
    pub dn_boxes: Vec<BBox>,
    /// Reconstruction target of each denoising slot.
    pub dn_targets: Vec<usize>,
}

impl QueryBatch {
    pub fn len(&self) -> usize {
        self.contents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contents.is_empty()
    }

    pub fn dn_len(&self) -> usize {
        self.groups * self.objects
    }

    /// 1 on denoising slots, 0 on matching slots.
    pub fn indicators(&self) -> Vec<u8> {
        self.contents
            .iter()
            .map(|c| matches!(c, QueryContent::Label(_)) as u8)
            .collect()
    }

    /// Label-table row for each slot; the unknown class is row `n_classes`.
    pub fn label_rows(&self, n_classes: usize) -> Vec<usize> {
        self.contents
            .iter()
            .map(|c| match c {
                QueryContent::Label(l) => *l,
                QueryContent::Unknown => n_classes,
            })
            .collect()
    }

    /// Slot range of group `p`.
    pub fn group_range(&self, p: usize) -> std::ops::Range<usize> {
        p * self.objects..(p + 1) * self.objects
    }

    pub fn mask(&self) -> AttentionMask {
        build_attention_mask(self.groups, self.objects, self.matching)
    }
}

/// Lay out denoising groups ahead of `matching` unknown-class queries.
///
/// The positional part of matching queries comes from the model's learnable
/// anchors, so only the denoising boxes are stored here.
pub fn assemble_decoder_input(groups: &[DenoisingGroup], matching: usize) -> QueryBatch {
    let objects = groups.first().map_or(0, |g| g.queries.len());
    debug_assert!(groups.iter().all(|g| g.queries.len() == objects));
    let dn = groups.len() * objects;
    let mut contents = Vec::with_capacity(dn + matching);
    let mut dn_boxes = Vec::with_capacity(dn);
    let mut dn_targets = Vec::with_capacity(dn);
    for q in groups.iter().flat_map(|g| &g.queries) {
        contents.push(QueryContent::Label(q.input_label));
        dn_boxes.push(q.bbox);
        dn_targets.push(q.target);
    }
    contents.extend(std::iter::repeat_n(QueryContent::Unknown, matching));
    QueryBatch {
        groups: if objects == 0 { 0 } else { groups.len() },
        objects,
        matching,
        contents,
        dn_boxes,
        dn_targets,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gts() -> Vec<GtObject> {
        vec![
            GtObject::new(BBox::new(0.3, 0.3, 0.2, 0.1), 2),
            GtObject::new(BBox::new(0.7, 0.6, 0.3, 0.3), 0),
            GtObject::new(BBox::new(0.5, 0.8, 0.1, 0.2), 5),
        ]
    }

    #[test]
    fn flip_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let labels: Vec<usize> = (0..100).map(|i| i % 8).collect();
        let (out, flags) = flip_labels(&labels, 0.0, 8, &mut rng).unwrap();
        assert_eq!(out, labels);
        assert!(flags.iter().all(|f| !f));
        let (out, flags) = flip_labels(&labels, 1.0, 8, &mut rng).unwrap();
        assert!(out.iter().zip(&labels).all(|(a, b)| a != b));
        assert!(flags.iter().all(|&f| f));
        assert!(out.iter().all(|&l| l < 8));
    }

    #[test]
    fn flip_rate_matches_gamma() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let labels = vec![3usize; 10_000];
        let (_, flags) = flip_labels(&labels, 0.2, 8, &mut rng).unwrap();
        let rate = flags.iter().filter(|&&f| f).count() as f64 / 1e4;
        assert!((0.18..=0.22).contains(&rate), "rate {rate}");
    }

    #[test]
    fn flipped_labels_are_uniform_over_others() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let labels = vec![2usize; 7000];
        let (out, _) = flip_labels(&labels, 1.0, 8, &mut rng).unwrap();
        let mut counts = [0usize; 8];
        for l in out {
            counts[l] += 1;
        }
        assert_eq!(counts[2], 0);
        for (c, &n) in counts.iter().enumerate().filter(|(c, _)| *c != 2) {
            assert!((800..1200).contains(&n), "class {c}: {n}");
        }
    }

    #[test]
    fn flip_rejects_single_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(flip_labels(&[0], 0.5, 1, &mut rng).is_err());
        assert!(flip_labels(&[0], 0.0, 1, &mut rng).is_ok());
    }

    #[test]
    fn zero_noise_groups_reproduce_gt() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = make_denoising_groups(&gts(), 5, &NoiseConfig::zero(), 8, &mut rng).unwrap();
        assert_eq!(g.len(), 5);
        for group in &g {
            for (m, q) in group.queries.iter().enumerate() {
                assert_eq!(q.bbox, gts()[m].bbox);
                assert_eq!(q.input_label, gts()[m].label);
                assert_eq!(q.target, m);
            }
        }
    }

    #[test]
    fn group_major_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = make_denoising_groups(&gts(), 5, &NoiseConfig::default(), 8, &mut rng).unwrap();
        let batch = assemble_decoder_input(&g, 16);
        assert_eq!(batch.dn_len(), 15);
        assert_eq!(batch.len(), 31);
        for k in 0..15 {
            assert_eq!(batch.dn_targets[k], k % 3);
            assert!(batch.group_range(k / 3).contains(&k));
        }
    }

    #[test]
    fn groups_are_noised_independently() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = make_denoising_groups(&gts(), 4, &NoiseConfig::default(), 8, &mut rng).unwrap();
        for p in 0..4 {
            for q in (p + 1)..4 {
                for m in 0..3 {
                    assert_ne!(g[p].queries[m].bbox, g[q].queries[m].bbox);
                }
            }
        }
    }

    #[test]
    fn empty_scene_has_no_denoising_part() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = make_denoising_groups(&[], 5, &NoiseConfig::default(), 8, &mut rng).unwrap();
        let batch = assemble_decoder_input(&g, 4);
        assert_eq!(batch.len(), 4);
        assert_eq!(batch.mask(), AttentionMask::unblocked(4));
    }

    fn rows(mask: &AttentionMask) -> Vec<Vec<u8>> {
        (0..mask.size())
            .map(|i| mask.row(i).iter().map(|&b| b as u8).collect())
            .collect()
    }

    #[test]
    fn mask_examples() {
        assert_eq!(
            rows(&build_attention_mask(2, 1, 1)),
            vec![vec![0, 1, 0], vec![1, 0, 0], vec![1, 1, 0]]
        );
        assert_eq!(build_attention_mask(0, 3, 5), AttentionMask::unblocked(5));
        assert_eq!(
            rows(&build_attention_mask(1, 2, 2)),
            vec![
                vec![0, 0, 0, 0],
                vec![0, 0, 0, 0],
                vec![1, 1, 0, 0],
                vec![1, 1, 0, 0]
            ]
        );
    }

    #[test]
    fn mask_structure() {
        for p in 0..=4 {
            for m in 1..=5 {
                for n in 0..=8 {
                    let mask = build_attention_mask(p, m, n);
                    let dn = p * m;
                    for i in 0..mask.size() {
                        for j in 0..mask.size() {
                            if i < dn && j < dn {
                                assert_eq!(mask.is_blocked(i, j), mask.is_blocked(j, i));
                                assert_eq!(mask.is_blocked(i, j), i / m != j / m);
                            }
                            if i >= dn && j < dn {
                                assert!(mask.is_blocked(i, j));
                            }
                            if j >= dn {
                                assert!(!mask.is_blocked(i, j));
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn indicators_and_flipped_content() {
        let mut g = vec![DenoisingGroup {
            queries: vec![
                DenoisingQuery {
                    bbox: BBox::new(0.5, 0.5, 0.1, 0.1),
                    input_label: 4,
                    flipped: true,
                    target: 0,
                },
                DenoisingQuery {
                    bbox: BBox::new(0.2, 0.5, 0.1, 0.1),
                    input_label: 1,
                    flipped: false,
                    target: 1,
                },
            ],
        }];
        let batch = assemble_decoder_input(&g, 3);
        assert_eq!(batch.indicators(), vec![1, 1, 0, 0, 0]);
        assert_eq!(batch.label_rows(8), vec![4, 1, 8, 8, 8]);
        assert_eq!(batch.dn_targets, vec![0, 1]);
        g.clear();
        let batch = assemble_decoder_input(&g, 3);
        assert_eq!(batch.indicators(), vec![0, 0, 0]);
    }
}
