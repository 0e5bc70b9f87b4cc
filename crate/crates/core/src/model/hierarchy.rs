use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// One `N@f` entry: `layers` blocks operating at `factor`-times shortened
/// resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stage {
    pub layers: usize,
    pub factor: usize,
}

/// Recursive form of a hierarchy.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Level {
    /// Innermost stack of blocks.
    Leaf { layers: usize },
    /// Vanilla blocks around a shortened inner level.
    Shortened {
        pre: usize,
        /// Shorten factor relative to this level's resolution.
        factor: usize,
        inner: Box<Level>,
        post: usize,
    },
}

impl Level {
    /// Number of shortening levels below this one.
    pub fn depth(&self) -> usize {
        match self {
            Level::Leaf { .. } => 0,
            Level::Shortened { inner, .. } => 1 + inner.depth(),
        }
    }

    /// Relative factors from the outermost level inwards.
    pub fn factors(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut cur = self;
        while let Level::Shortened { factor, inner, .. } = cur {
            out.push(*factor);
            cur = inner;
        }
        out
    }
}

/// Validated `N1@f1 … Nm@fm` description of an hourglass stack.
///
/// Factors must rise to a single peak and fall back symmetrically, every
/// step between adjacent factors must be an integer ratio, and the
/// ascending and descending factor sequences must mirror each other. Layer
/// counts need not mirror. Adjacent entries with equal factors are merged.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Hierarchy {
    stages: Vec<Stage>,
    root: Level,
}

impl Hierarchy {
    pub fn parse(text: &str) -> Result<Self> {
        let mut stages = Vec::new();
        let mut offset = 0;
        for token in text.split_inclusive(|c: char| c.is_whitespace() || c == ',') {
            let start = offset;
            offset += token.len();
            let trimmed_lead = token.len() - token.trim_start_matches(['(', ' ', '\t', '\n']).len();
            let body = token
                .trim_matches(|c: char| c.is_whitespace() || c == ',' || c == '(' || c == ')');
            if body.is_empty() {
                continue;
            }
            let at = start + trimmed_lead;
            let bad = |message: String| Error::Parse { offset: at, message };
            let (n, f) = body
                .split_once('@')
                .ok_or_else(|| bad(format!("expected `N@f`, found `{body}`")))?;
            let layers = n
                .parse::<usize>()
                .map_err(|_| bad(format!("layer count `{n}` is not a non-negative integer")))?;
            let factor = f
                .parse::<usize>()
                .map_err(|_| bad(format!("factor `{f}` is not a positive integer")))?;
            if factor == 0 {
                return Err(bad("factor must be at least 1".into()));
            }
            stages.push(Stage { layers, factor });
        }
        Hierarchy::from_stages(stages)
    }

    pub fn from_stages(stages: Vec<Stage>) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::Parse {
                offset: 0,
                message: "empty hierarchy".into(),
            });
        }
        let mut merged: Vec<Stage> = Vec::with_capacity(stages.len());
        for s in &stages {
            match merged.last_mut() {
                Some(last) if last.factor == s.factor => last.layers += s.layers,
                _ => merged.push(*s),
            }
        }
        let peak = merged
            .iter()
            .enumerate()
            .max_by_key(|(i, s)| (s.factor, std::cmp::Reverse(*i)))
            .map(|(i, _)| i)
            .expect("non-empty");
        let asc = &merged[..peak];
        let desc = &merged[peak + 1..];
        let rising = merged[..=peak].windows(2).all(|w| w[0].factor < w[1].factor);
        let falling = merged[peak..].windows(2).all(|w| w[0].factor > w[1].factor);
        if !rising || !falling {
            return Err(Error::Validation {
                rule: "unimodal",
                message: format!(
                    "factors {:?} must rise to a single peak and then fall",
                    stages.iter().map(|s| s.factor).collect::<Vec<_>>()
                ),
            });
        }
        for w in merged[..=peak].windows(2) {
            if w[1].factor % w[0].factor != 0 {
                return Err(Error::Validation {
                    rule: "integer ratio",
                    message: format!("{} is not a multiple of {}", w[1].factor, w[0].factor),
                });
            }
        }
        for w in merged[peak..].windows(2) {
            if w[0].factor % w[1].factor != 0 {
                return Err(Error::Validation {
                    rule: "integer ratio",
                    message: format!("{} is not a multiple of {}", w[0].factor, w[1].factor),
                });
            }
        }
        let up: Vec<usize> = asc.iter().map(|s| s.factor).collect();
        let down: Vec<usize> = desc.iter().rev().map(|s| s.factor).collect();
        if up != down {
            return Err(Error::Validation {
                rule: "mirror",
                message: format!("ascending factors {up:?} do not mirror descending {down:?}"),
            });
        }

        // Levels pair the i-th ascending stage with the i-th from the end. A
        // profile that starts above 1 gets implicit empty full-resolution
        // stages.
        let mut outer: Vec<(usize, usize, usize)> = Vec::new();
        if merged[0].factor != 1 {
            outer.push((0, 1, 0));
        }
        for (a, d) in asc.iter().zip(desc.iter().rev()) {
            outer.push((a.layers, a.factor, d.layers));
        }
        let peak_stage = merged[peak];
        let mut root = Level::Leaf {
            layers: peak_stage.layers,
        };
        let mut inner_factor = peak_stage.factor;
        for &(pre, factor, post) in outer.iter().rev() {
            root = Level::Shortened {
                pre,
                factor: inner_factor / factor,
                inner: Box::new(root),
                post,
            };
            inner_factor = factor;
        }
        Ok(Hierarchy {
            stages: merged,
            root,
        })
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn root(&self) -> &Level {
        &self.root
    }

    pub fn depth(&self) -> usize {
        self.root.depth()
    }

    /// Product of all relative factors (the peak factor).
    pub fn total_factor(&self) -> usize {
        self.root.factors().iter().product()
    }

    pub fn total_layers(&self) -> usize {
        self.stages.iter().map(|s| s.layers).sum()
    }

    /// Layers that run at full token resolution.
    pub fn vanilla_layers(&self) -> usize {
        match &self.root {
            Level::Leaf { layers } => *layers,
            Level::Shortened { pre, post, .. } => pre + post,
        }
    }
}

impl FromStr for Hierarchy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Hierarchy::parse(s)
    }
}

impl fmt::Display for Hierarchy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .stages
            .iter()
            .map(|s| format!("{}@{}", s.layers, s.factor))
            .collect();
        f.write_str(&parts.join(" "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(layers: usize) -> Box<Level> {
        Box::new(Level::Leaf { layers })
    }

    #[test]
    fn single_shortening() {
        let h = Hierarchy::parse("2@1 8@3 2@1").unwrap();
        assert_eq!(
            h.stages(),
            &[
                Stage { layers: 2, factor: 1 },
                Stage { layers: 8, factor: 3 },
                Stage { layers: 2, factor: 1 }
            ]
        );
        assert_eq!(
            h.root(),
            &Level::Shortened {
                pre: 2,
                factor: 3,
                inner: leaf(8),
                post: 2
            }
        );
    }

    #[test]
    fn nested_shortening() {
        let h = Hierarchy::parse("2@1 1@2 4@4 1@2 2@1").unwrap();
        assert_eq!(
            h.root(),
            &Level::Shortened {
                pre: 2,
                factor: 2,
                inner: Box::new(Level::Shortened {
                    pre: 1,
                    factor: 2,
                    inner: leaf(4),
                    post: 1
                }),
                post: 2
            }
        );
        assert_eq!(h.depth(), 2);
        assert_eq!(h.total_factor(), 4);
    }

    #[test]
    fn vanilla_baseline() {
        let h = Hierarchy::parse("6@1").unwrap();
        assert_eq!(h.root(), &Level::Leaf { layers: 6 });
        assert_eq!(h.depth(), 0);
    }

    #[test]
    fn zero_vanilla_layers() {
        let h = Hierarchy::parse("0@1 8@3 0@1").unwrap();
        assert_eq!(h.vanilla_layers(), 0);
        assert_eq!(h.depth(), 1);
        let implicit = Hierarchy::parse("8@3").unwrap();
        assert_eq!(implicit.root(), h.root());
    }

    #[test]
    fn accepts_loose_punctuation() {
        let h = Hierarchy::parse("(4@1, 8@3, 4@1)").unwrap();
        assert_eq!(h.to_string(), "4@1 8@3 4@1");
    }

    #[test]
    fn layer_counts_need_not_mirror() {
        let h = Hierarchy::parse("1@1 4@2 3@1").unwrap();
        assert!(matches!(h.root(), Level::Shortened { pre: 1, post: 3, .. }));
    }

    #[test]
    fn parse_errors_carry_offsets() {
        match Hierarchy::parse("2@1 x@3 2@1") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(Hierarchy::parse("2@1 83 2@1"), Err(Error::Parse { offset: 4, .. })));
        assert!(matches!(Hierarchy::parse("2@0"), Err(Error::Parse { .. })));
        assert!(matches!(Hierarchy::parse("   "), Err(Error::Parse { .. })));
    }

    #[test]
    fn validation_rules_are_named() {
        let rule = |s: &str| match Hierarchy::parse(s) {
            Err(Error::Validation { rule, .. }) => rule,
            other => panic!("{s}: unexpected {other:?}"),
        };
        assert_eq!(rule("2@1 4@3 2@2 4@3 2@1"), "unimodal");
        assert_eq!(rule("1@1 2@2 1@1 2@2 1@1"), "unimodal");
        assert_eq!(rule("2@1 4@2 4@3 2@2 2@1"), "integer ratio");
        assert_eq!(rule("2@1 8@3"), "mirror");
        assert_eq!(rule("2@1 1@2 8@4 2@1"), "mirror");
    }
}
