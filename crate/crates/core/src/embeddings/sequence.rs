use serde::{Deserialize, Serialize};

use super::vocab::{Vocab, CLS, SEP};
use crate::error::{Error, Result};

/// Text segments use ids 0 and 1, image slots 2 and 3.
pub const NUM_SEGMENTS: usize = 4;
pub const MAX_TEXT_SEGMENTS: usize = 2;
pub const MAX_IMAGES: usize = 2;
pub const FIRST_IMAGE_SEGMENT: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TextToken {
    pub token_id: u32,
    pub segment_id: u8,
    pub position: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualRegion {
    pub feature: Vec<f32>,
    /// `[x1, y1, x2, y2]`, normalized to the unit square.
    #[serde(rename = "box")]
    pub bbox: [f32; 4],
    pub confidence: f32,
}

impl VisualRegion {
    pub fn validate(&self, visual_dim: usize) -> Result<()> {
        let [x1, y1, x2, y2] = self.bbox;
        if self.feature.len() != visual_dim {
            return Err(Error::Input(format!(
                "region feature has {} dims, expected {visual_dim}",
                self.feature.len()
            )));
        }
        if !(x1 < x2 && y1 < y2) {
            return Err(Error::Input(format!("degenerate box {:?}", self.bbox)));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::Input(format!("confidence {} outside [0, 1]", self.confidence)));
        }
        if self.feature.iter().any(|x| !x.is_finite()) {
            return Err(Error::Input("non-finite region feature".into()));
        }
        Ok(())
    }
}

/// Per-region optional list of aligned text positions.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentMap {
    pub regions: Vec<Option<Vec<usize>>>,
}

impl AlignmentMap {
    pub fn unaligned(n_regions: usize) -> Self {
        AlignmentMap {
            regions: vec![None; n_regions],
        }
    }

    pub fn validate(&self, n_regions: usize, n_positions: usize) -> Result<()> {
        if self.regions.len() != n_regions {
            return Err(Error::Alignment(format!(
                "alignment covers {} regions, image has {n_regions}",
                self.regions.len()
            )));
        }
        for (r, positions) in self.regions.iter().enumerate() {
            for &p in positions.iter().flatten() {
                if p >= n_positions {
                    return Err(Error::Alignment(format!(
                        "region {r} aligned to position {p}, only {n_positions} available"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Text,
    Region,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionSlot {
    pub region: VisualRegion,
    pub segment_id: u8,
    /// Aligned positions within this sequence's text slots.
    pub aligned: Option<Vec<usize>>,
    /// Image slot (0 or 1) and index of the region within that image.
    pub image: usize,
    pub index: usize,
}

/// One model input: `[CLS] text1 [SEP] (text2 [SEP])? regions(image1) regions(image2)?`.
/// Text slots precede region slots, so slot `i` is text iff `i < text.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointSequence {
    pub text: Vec<TextToken>,
    pub regions: Vec<RegionSlot>,
    pub modality: Vec<Modality>,
    pub cls: usize,
    pub separators: Vec<usize>,
    /// Sequence position of each word in reading order (specials excluded).
    pub word_positions: Vec<usize>,
}

impl JointSequence {
    pub fn len(&self) -> usize {
        self.text.len() + self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn text_len(&self) -> usize {
        self.text.len()
    }

    pub fn region_slot(&self, i: usize) -> usize {
        self.text.len() + i
    }

    /// Slots belonging to image slot `image`, in region order.
    pub fn image_slots(&self, image: usize) -> Vec<usize> {
        self.regions
            .iter()
            .enumerate()
            .filter(|(_, r)| r.image == image)
            .map(|(i, _)| self.region_slot(i))
            .collect()
    }

    pub fn is_structural(&self, pos: usize) -> bool {
        pos == self.cls || self.separators.contains(&pos)
    }

    /// Copy without any region slots (text-only variants).
    pub fn without_regions(&self) -> JointSequence {
        let mut s = self.clone();
        s.regions.clear();
        s.modality.truncate(s.text.len());
        s
    }
}

/// One image's regions and an optional alignment whose positions index words
/// of the concatenated text segments (specials excluded).
#[derive(Debug, Clone, Copy)]
pub struct ImageInput<'a> {
    pub regions: &'a [VisualRegion],
    pub alignment: Option<&'a AlignmentMap>,
}

impl<'a> ImageInput<'a> {
    pub fn new(regions: &'a [VisualRegion]) -> Self {
        ImageInput {
            regions,
            alignment: None,
        }
    }

    pub fn aligned(regions: &'a [VisualRegion], alignment: &'a AlignmentMap) -> Self {
        ImageInput {
            regions,
            alignment: Some(alignment),
        }
    }
}

/// Lays out text segments and images into one sequence.
pub fn assemble_sequence(texts: &[&[u32]], images: &[ImageInput<'_>], max_len: usize) -> Result<JointSequence> {
    if texts.is_empty() || texts.iter().any(|t| t.is_empty()) {
        return Err(Error::Length("every text segment must contain at least one token".into()));
    }
    if texts.len() > MAX_TEXT_SEGMENTS {
        return Err(Error::Input(format!("at most {MAX_TEXT_SEGMENTS} text segments")));
    }
    if images.len() > MAX_IMAGES {
        return Err(Error::Input(format!("at most {MAX_IMAGES} images")));
    }
    let n_words: usize = texts.iter().map(|t| t.len()).sum();
    let n_regions: usize = images.iter().map(|im| im.regions.len()).sum();
    let total = 1 + texts.len() + n_words + n_regions;
    if total > max_len {
        return Err(Error::Length(format!("sequence of {total} slots exceeds maximum {max_len}")));
    }

    let mut text = Vec::with_capacity(1 + texts.len() + n_words);
    let mut separators = Vec::with_capacity(texts.len());
    let mut word_positions = Vec::with_capacity(n_words);
    text.push(TextToken {
        token_id: CLS,
        segment_id: 0,
        position: 0,
    });
    for (seg, words) in texts.iter().enumerate() {
        for &id in *words {
            word_positions.push(text.len());
            text.push(TextToken {
                token_id: id,
                segment_id: seg as u8,
                position: text.len(),
            });
        }
        separators.push(text.len());
        text.push(TextToken {
            token_id: SEP,
            segment_id: seg as u8,
            position: text.len(),
        });
    }

    let mut regions = Vec::with_capacity(n_regions);
    for (image, input) in images.iter().enumerate() {
        if let Some(a) = input.alignment {
            a.validate(input.regions.len(), n_words)?;
        }
        for (index, region) in input.regions.iter().enumerate() {
            let aligned = input
                .alignment
                .and_then(|a| a.regions[index].as_ref())
                .map(|words| words.iter().map(|&w| word_positions[w]).collect());
            regions.push(RegionSlot {
                region: region.clone(),
                segment_id: FIRST_IMAGE_SEGMENT + image as u8,
                aligned,
                image,
                index,
            });
        }
    }
    let mut modality = vec![Modality::Text; text.len()];
    modality.extend(std::iter::repeat_n(Modality::Region, regions.len()));
    Ok(JointSequence {
        text,
        regions,
        modality,
        cls: 0,
        separators,
        word_positions,
    })
}

/// Convenience for callers holding plain strings.
pub fn assemble_from_words(
    vocab: &Vocab,
    texts: &[&[String]],
    images: &[ImageInput<'_>],
    max_len: usize,
) -> Result<JointSequence> {
    let ids: Vec<Vec<u32>> = texts.iter().map(|t| vocab.encode_words(t)).collect();
    let refs: Vec<&[u32]> = ids.iter().map(Vec::as_slice).collect();
    assemble_sequence(&refs, images, max_len)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn region(dim: usize, confidence: f32) -> VisualRegion {
        VisualRegion {
            feature: vec![0.0; dim],
            bbox: [0.1, 0.1, 0.5, 0.5],
            confidence,
        }
    }

    #[test]
    fn single_caption_layout() {
        let rs = vec![region(4, 0.5), region(4, 0.6)];
        let s = assemble_sequence(&[&[5, 6, 7]], &[ImageInput::new(&rs)], 64).unwrap();
        assert_eq!(s.len(), 2 + 3 + 2);
        assert_eq!(s.modality.iter().filter(|m| **m == Modality::Region).count(), 2);
        assert_eq!(s.text[0].token_id, CLS);
        assert_eq!(s.separators, vec![4]);
        assert_eq!(s.word_positions, vec![1, 2, 3]);
        assert_eq!(s.image_slots(0), vec![5, 6]);
    }

    #[test]
    fn two_images_get_distinct_segments() {
        let a = vec![region(4, 0.5)];
        let b = vec![region(4, 0.5), region(4, 0.1)];
        let s = assemble_sequence(&[&[5]], &[ImageInput::new(&a), ImageInput::new(&b)], 64).unwrap();
        assert_eq!(s.regions[0].segment_id, 2);
        assert_eq!(s.regions[1].segment_id, 3);
        assert_eq!(s.regions[2].segment_id, 3);
        assert_ne!(s.regions[0].segment_id, s.regions[1].segment_id);
    }

    #[test]
    fn two_text_segments_carry_their_ids() {
        let s = assemble_sequence(&[&[5, 6], &[7]], &[], 64).unwrap();
        let segs: Vec<u8> = s.text.iter().map(|t| t.segment_id).collect();
        assert_eq!(segs, vec![0, 0, 0, 0, 1, 1]);
        assert_eq!(s.separators, vec![3, 5]);
        let pos: Vec<usize> = s.text.iter().map(|t| t.position).collect();
        assert_eq!(pos, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn empty_text_and_overflow_rejected() {
        assert!(matches!(assemble_sequence(&[], &[], 64), Err(Error::Length(_))));
        assert!(matches!(assemble_sequence(&[&[]], &[], 64), Err(Error::Length(_))));
        let rs = vec![region(2, 0.5); 10];
        assert!(matches!(
            assemble_sequence(&[&[5; 10]], &[ImageInput::new(&rs)], 21),
            Err(Error::Length(_))
        ));
        assert!(assemble_sequence(&[&[5; 10]], &[ImageInput::new(&rs)], 22).is_ok());
    }

    #[test]
    fn alignments_map_words_to_sequence_positions() {
        let rs = vec![region(2, 0.5), region(2, 0.5)];
        let a = AlignmentMap {
            regions: vec![Some(vec![0, 2]), None],
        };
        let s = assemble_sequence(&[&[5, 6], &[7]], &[ImageInput::aligned(&rs, &a)], 64).unwrap();
        // word 2 is the first word of the second segment, after [CLS] w w [SEP]
        assert_eq!(s.regions[0].aligned, Some(vec![1, 4]));
        assert_eq!(s.regions[1].aligned, None);
        let bad = AlignmentMap {
            regions: vec![Some(vec![3]), None],
        };
        assert!(matches!(
            assemble_sequence(&[&[5, 6], &[7]], &[ImageInput::aligned(&rs, &bad)], 64),
            Err(Error::Alignment(_))
        ));
    }

    #[test]
    fn region_validation() {
        assert!(region(3, 0.5).validate(3).is_ok());
        assert!(region(3, 0.5).validate(4).is_err());
        assert!(region(3, 1.5).validate(3).is_err());
        let mut r = region(3, 0.5);
        r.bbox = [0.5, 0.1, 0.5, 0.4];
        assert!(r.validate(3).is_err());
    }
}
