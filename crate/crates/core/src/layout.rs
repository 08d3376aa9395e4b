//! Sequence layout: which positions hold visual tokens (per camera view),
//! which hold the instruction text, and which are action slots.

use std::collections::BTreeSet;
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sorted set of original token positions.
pub type TokenSet = BTreeSet<usize>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum View {
    ThirdPerson,
    Wrist,
}

impl View {
    pub fn name(self) -> &'static str {
        match self {
            View::ThirdPerson => "third-person",
            View::Wrist => "wrist",
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewRange {
    pub view: View,
    pub start: usize,
    pub end: usize,
}

impl ViewRange {
    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    view_ranges: Vec<ViewRange>,
    text_range: Range<usize>,
    action_range: Range<usize>,
}

impl TokenLayout {
    pub fn new(
        view_ranges: Vec<ViewRange>,
        text_range: Range<usize>,
        action_range: Range<usize>,
    ) -> Result<Self> {
        let mut cursor = 0;
        for vr in &view_ranges {
            if vr.start != cursor || vr.end < vr.start {
                return Err(Error::InvalidLayout(format!(
                    "view range {}..{} for {} is not contiguous with {}",
                    vr.start, vr.end, vr.view, cursor
                )));
            }
            cursor = vr.end;
        }
        let mut seen = BTreeSet::new();
        if !view_ranges.iter().all(|vr| seen.insert(vr.view)) {
            return Err(Error::InvalidLayout("duplicate view".into()));
        }
        if text_range.start != cursor || text_range.end < text_range.start {
            return Err(Error::InvalidLayout(
                "text range must directly follow the visual tokens".into(),
            ));
        }
        if action_range.start != text_range.end || action_range.end < action_range.start {
            return Err(Error::InvalidLayout(
                "action range must directly follow the text range".into(),
            ));
        }
        Ok(Self {
            view_ranges,
            text_range,
            action_range,
        })
    }

    /// Views laid out back to back, `patches_per_view` tokens each.
    pub fn uniform(views: &[View], patches_per_view: usize, text: usize, action: usize) -> Result<Self> {
        let view_ranges = views
            .iter()
            .enumerate()
            .map(|(i, &view)| ViewRange {
                view,
                start: i * patches_per_view,
                end: (i + 1) * patches_per_view,
            })
            .collect::<Vec<_>>();
        let visual = views.len() * patches_per_view;
        Self::new(view_ranges, visual..visual + text, visual + text..visual + text + action)
    }

    pub fn view_ranges(&self) -> &[ViewRange] {
        &self.view_ranges
    }

    pub fn view_range(&self, view: View) -> Option<&ViewRange> {
        self.view_ranges.iter().find(|vr| vr.view == view)
    }

    pub fn text_range(&self) -> Range<usize> {
        self.text_range.clone()
    }

    pub fn action_range(&self) -> Range<usize> {
        self.action_range.clone()
    }

    pub fn seq_len(&self) -> usize {
        self.action_range.end
    }

    pub fn visual_len(&self) -> usize {
        self.text_range.start
    }

    pub fn text_len(&self) -> usize {
        self.text_range.len()
    }

    pub fn is_visual(&self, index: usize) -> bool {
        index < self.text_range.start
    }

    pub fn view_of(&self, index: usize) -> Option<View> {
        self.view_ranges
            .iter()
            .find(|vr| vr.range().contains(&index))
            .map(|vr| vr.view)
    }

    pub fn all(&self) -> TokenSet {
        (0..self.seq_len()).collect()
    }

    pub fn visual(&self) -> TokenSet {
        (0..self.visual_len()).collect()
    }

    /// Text and action positions; never pruned.
    pub fn non_prunable(&self) -> TokenSet {
        (self.text_range.start..self.seq_len()).collect()
    }

    pub fn visual_in_view(&self, view: View) -> TokenSet {
        self.view_range(view).map(|vr| vr.range().collect()).unwrap_or_default()
    }

    /// Checks that `retained` is a legal active set for a forward pass.
    pub fn check_retained(&self, retained: &TokenSet) -> Result<()> {
        if let Some(&last) = retained.iter().next_back() {
            if last >= self.seq_len() {
                return Err(Error::IndexOutOfRange {
                    index: last,
                    len: self.seq_len(),
                });
            }
        }
        for i in self.text_range.start..self.seq_len() {
            if !retained.contains(&i) {
                return Err(Error::NonPrunableDropped(i));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_layout_ranges() {
        let layout = TokenLayout::uniform(&[View::ThirdPerson, View::Wrist], 64, 6, 8).unwrap();
        assert_eq!(layout.visual_len(), 128);
        assert_eq!(layout.text_range(), 128..134);
        assert_eq!(layout.action_range(), 134..142);
        assert_eq!(layout.view_of(70), Some(View::Wrist));
        assert_eq!(layout.view_of(130), None);
        assert_eq!(layout.non_prunable().len(), 14);
    }

    #[test]
    fn rejects_gaps_and_duplicates() {
        let gap = TokenLayout::new(
            vec![ViewRange { view: View::Wrist, start: 1, end: 4 }],
            4..6,
            6..7,
        );
        assert!(gap.is_err());
        let dup = TokenLayout::new(
            vec![
                ViewRange { view: View::Wrist, start: 0, end: 2 },
                ViewRange { view: View::Wrist, start: 2, end: 4 },
            ],
            4..6,
            6..7,
        );
        assert!(dup.is_err());
    }

    #[test]
    fn retained_must_cover_text_and_action() {
        let layout = TokenLayout::uniform(&[View::ThirdPerson], 4, 2, 2).unwrap();
        let mut keep: TokenSet = [0, 4, 5, 6, 7].into_iter().collect();
        layout.check_retained(&keep).unwrap();
        keep.remove(&5);
        assert!(matches!(layout.check_retained(&keep), Err(Error::NonPrunableDropped(5))));
        keep.insert(5);
        keep.insert(8);
        assert!(matches!(layout.check_retained(&keep), Err(Error::IndexOutOfRange { .. })));
    }
}
