//! Seed and input selectors such as `test:0..9`, `train:3,7` or `gaussian:20`.

use patchsynth::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Selector {
    /// Positions within the class images of a corpus split.
    Split { split: String, indices: Vec<usize> },
    /// Seeds sampled from a Gaussian fit to the training seeds.
    Gaussian { count: usize },
}

fn parse_index(s: &str) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| Error::config(format!("'{s}' is not a non-negative integer")))
}

/// Parses `a..b` (inclusive), `a..=b`, `a,b,c` or a single index.
pub fn parse_indices(spec: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in spec.split(',') {
        if let Some((a, b)) = part.split_once("..") {
            let lo = parse_index(a)?;
            let hi = parse_index(b.trim_start_matches('='))?;
            if hi < lo {
                return Err(Error::config(format!("empty range '{part}'")));
            }
            out.extend(lo..=hi);
        } else {
            out.push(parse_index(part)?);
        }
    }
    Ok(out)
}

pub fn parse_selector(spec: &str) -> Result<Selector> {
    let (kind, rest) = spec
        .split_once(':')
        .ok_or_else(|| Error::config(format!("selector '{spec}' must look like test:0..9 or gaussian:N")))?;
    match kind {
        "gaussian" => Ok(Selector::Gaussian {
            count: parse_index(rest)?,
        }),
        "" => Err(Error::config(format!("selector '{spec}' has no split name"))),
        split => Ok(Selector::Split {
            split: split.to_string(),
            indices: parse_indices(rest)?,
        }),
    }
}

/// Stable small integer for a split name, mixed into per-run seeds.
pub fn split_tag(split: &str) -> u64 {
    split.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges_are_inclusive() {
        assert_eq!(parse_indices("0..9").unwrap(), (0..10).collect::<Vec<_>>());
        assert_eq!(parse_indices("2..=4").unwrap(), vec![2, 3, 4]);
        assert_eq!(parse_indices("5").unwrap(), vec![5]);
        assert_eq!(parse_indices("1,3..4,9").unwrap(), vec![1, 3, 4, 9]);
        assert!(parse_indices("4..2").is_err());
        assert!(parse_indices("x").is_err());
    }

    #[test]
    fn selectors() {
        assert_eq!(
            parse_selector("test:0..2").unwrap(),
            Selector::Split {
                split: "test".into(),
                indices: vec![0, 1, 2]
            }
        );
        assert_eq!(parse_selector("gaussian:7").unwrap(), Selector::Gaussian { count: 7 });
        assert!(parse_selector("test").is_err());
        assert!(parse_selector(":1").is_err());
    }

    #[test]
    fn split_tags_differ() {
        assert_ne!(split_tag("test"), split_tag("train"));
    }
}
