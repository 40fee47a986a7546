//! Skeleton topology: keypoint names, bone edges, body parts, the
//! left/right flip permutation, and smoothness chains — plus a small
//! line-oriented text format so datasets can carry their topology.

use std::path::Path;

use super::GeomError;

/// A named group of keypoints treated as one rigid-ish body part.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Part {
    pub name: String,
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    pub num_keypoints: usize,
    /// One name per keypoint, index-aligned.
    pub names: Vec<String>,
    /// Undirected bone edges between keypoint indices.
    pub edges: Vec<(usize, usize)>,
    pub parts: Vec<Part>,
    /// `flip_perm[i]` is the keypoint that takes slot `i` under a left/right
    /// mirror. Must be an involution (applying it twice is the identity).
    pub flip_perm: Vec<usize>,
    /// Weight of the implicit whole-object part in part-based losses.
    pub whole_part_weight: f64,
    /// Ordered keypoint paths whose bending is penalized by the smoothness
    /// loss. Optional; each chain needs at least 3 distinct-in-sequence
    /// points to have an interior.
    pub chains: Vec<Vec<usize>>,
}

fn bad(what: impl Into<String>) -> GeomError {
    GeomError::BadSkeleton { what: what.into() }
}

impl Skeleton {
    pub fn validate(&self) -> Result<(), GeomError> {
        let k = self.num_keypoints;
        if k == 0 {
            return Err(bad("a skeleton needs at least one keypoint"));
        }
        if self.names.len() != k {
            return Err(bad(format!("{} names for {k} keypoints", self.names.len())));
        }
        for (i, name) in self.names.iter().enumerate() {
            if name.is_empty() || name.chars().any(|c| c.is_whitespace()) {
                return Err(bad(format!("keypoint {i} name {name:?} must be non-empty and contain no whitespace")));
            }
        }
        for &(a, b) in &self.edges {
            if a >= k || b >= k {
                return Err(bad(format!("edge ({a},{b}) out of range for {k} keypoints")));
            }
            if a == b {
                return Err(bad(format!("edge ({a},{b}) connects a keypoint to itself")));
            }
        }
        let mut part_names = std::collections::HashSet::new();
        for part in &self.parts {
            if part.name.is_empty() || part.name.chars().any(|c| c.is_whitespace()) {
                return Err(bad(format!("part name {:?} must be non-empty and contain no whitespace", part.name)));
            }
            if !part_names.insert(&part.name) {
                return Err(bad(format!("duplicate part name {:?}", part.name)));
            }
            let mut seen = vec![false; k];
            for &m in &part.members {
                if m >= k {
                    return Err(bad(format!("part {:?} member {m} out of range", part.name)));
                }
                if seen[m] {
                    return Err(bad(format!("part {:?} lists keypoint {m} twice", part.name)));
                }
                seen[m] = true;
            }
            if part.members.is_empty() {
                return Err(bad(format!("part {:?} has no members", part.name)));
            }
        }
        if self.flip_perm.len() != k {
            return Err(bad(format!(
                "flip permutation has {} entries for {k} keypoints",
                self.flip_perm.len()
            )));
        }
        let mut hit = vec![false; k];
        for &p in &self.flip_perm {
            if p >= k {
                return Err(bad(format!("flip permutation entry {p} out of range")));
            }
            if hit[p] {
                return Err(bad(format!("flip permutation repeats {p}; not a permutation")));
            }
            hit[p] = true;
        }
        for i in 0..k {
            if self.flip_perm[self.flip_perm[i]] != i {
                return Err(bad(format!(
                    "flip permutation is not an involution at {i} (maps to {}, which maps to {})",
                    self.flip_perm[i],
                    self.flip_perm[self.flip_perm[i]]
                )));
            }
        }
        if !(self.whole_part_weight >= 0.0) || !self.whole_part_weight.is_finite() {
            return Err(bad(format!(
                "whole_part_weight must be finite and >= 0, got {}",
                self.whole_part_weight
            )));
        }
        for (ci, chain) in self.chains.iter().enumerate() {
            if chain.len() < 3 {
                return Err(bad(format!("chain {ci} has {} points; need at least 3", chain.len())));
            }
            for &p in chain {
                if p >= k {
                    return Err(bad(format!("chain {ci} index {p} out of range")));
                }
            }
            for w in chain.windows(2) {
                if w[0] == w[1] {
                    return Err(bad(format!("chain {ci} repeats keypoint {} consecutively", w[0])));
                }
            }
        }
        Ok(())
    }

    /// Serializes to the line format parsed by [`Skeleton::from_text`].
    /// Field order is fixed, so equal skeletons serialize identically.
    pub fn to_text(&self) -> String {
        let mut out = String::from("skeleton v1\n");
        out.push_str(&format!("keypoints {}\n", self.num_keypoints));
        for (i, name) in self.names.iter().enumerate() {
            out.push_str(&format!("name {i} {name}\n"));
        }
        for &(a, b) in &self.edges {
            out.push_str(&format!("edge {a} {b}\n"));
        }
        for part in &self.parts {
            out.push_str(&format!("part {}", part.name));
            for m in &part.members {
                out.push_str(&format!(" {m}"));
            }
            out.push('\n');
        }
        out.push_str("flip");
        for p in &self.flip_perm {
            out.push_str(&format!(" {p}"));
        }
        out.push('\n');
        out.push_str(&format!("whole_part_weight {}\n", self.whole_part_weight));
        for chain in &self.chains {
            out.push_str("chain");
            for p in chain {
                out.push_str(&format!(" {p}"));
            }
            out.push('\n');
        }
        out
    }

    /// Parses the line format:
    ///
    /// ```text
    /// skeleton v1
    /// keypoints K
    /// name <idx> <identifier>        (one per keypoint)
    /// edge <i> <j>                   (repeatable)
    /// part <name> <idx>...           (repeatable)
    /// flip <p0> ... <p{K-1}>         (optional; defaults to identity)
    /// whole_part_weight <w>          (optional; defaults to 0.1)
    /// chain <idx> <idx> <idx>...     (repeatable)
    /// ```
    ///
    /// Blank lines and lines starting with `#` are ignored. The result is
    /// validated before being returned.
    pub fn from_text(text: &str) -> Result<Skeleton, GeomError> {
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        match lines.next() {
            Some("skeleton v1") => {}
            other => return Err(bad(format!("expected header 'skeleton v1', got {other:?}"))),
        }
        let mut num_keypoints: Option<usize> = None;
        let mut names: Vec<Option<String>> = Vec::new();
        let mut edges = Vec::new();
        let mut parts = Vec::new();
        let mut flip_perm: Option<Vec<usize>> = None;
        let mut whole_part_weight = 0.1;
        let mut chains = Vec::new();

        let parse_idx = |tok: &str, line: &str| -> Result<usize, GeomError> {
            tok.parse::<usize>()
                .map_err(|_| bad(format!("bad index {tok:?} in line {line:?}")))
        };

        for line in lines {
            let mut toks = line.split_whitespace();
            let key = toks.next().expect("non-empty line");
            let rest: Vec<&str> = toks.collect();
            match key {
                "keypoints" => {
                    if num_keypoints.is_some() {
                        return Err(bad("duplicate 'keypoints' line"));
                    }
                    if rest.len() != 1 {
                        return Err(bad(format!("malformed line {line:?}")));
                    }
                    let k = parse_idx(rest[0], line)?;
                    num_keypoints = Some(k);
                    names = vec![None; k];
                }
                "name" => {
                    if rest.len() != 2 {
                        return Err(bad(format!("malformed line {line:?}")));
                    }
                    let i = parse_idx(rest[0], line)?;
                    if i >= names.len() {
                        return Err(bad(format!(
                            "name index {i} out of range (declare 'keypoints' first)"
                        )));
                    }
                    if names[i].is_some() {
                        return Err(bad(format!("keypoint {i} named twice")));
                    }
                    names[i] = Some(rest[1].to_string());
                }
                "edge" => {
                    if rest.len() != 2 {
                        return Err(bad(format!("malformed line {line:?}")));
                    }
                    edges.push((parse_idx(rest[0], line)?, parse_idx(rest[1], line)?));
                }
                "part" => {
                    if rest.len() < 2 {
                        return Err(bad(format!("malformed line {line:?}")));
                    }
                    let members = rest[1..]
                        .iter()
                        .map(|t| parse_idx(t, line))
                        .collect::<Result<Vec<_>, _>>()?;
                    parts.push(Part { name: rest[0].to_string(), members });
                }
                "flip" => {
                    if flip_perm.is_some() {
                        return Err(bad("duplicate 'flip' line"));
                    }
                    let perm = rest
                        .iter()
                        .map(|t| parse_idx(t, line))
                        .collect::<Result<Vec<_>, _>>()?;
                    flip_perm = Some(perm);
                }
                "whole_part_weight" => {
                    if rest.len() != 1 {
                        return Err(bad(format!("malformed line {line:?}")));
                    }
                    whole_part_weight = rest[0]
                        .parse::<f64>()
                        .map_err(|_| bad(format!("bad weight in line {line:?}")))?;
                }
                "chain" => {
                    let chain = rest
                        .iter()
                        .map(|t| parse_idx(t, line))
                        .collect::<Result<Vec<_>, _>>()?;
                    chains.push(chain);
                }
                other => return Err(bad(format!("unknown directive {other:?}"))),
            }
        }

        let num_keypoints = num_keypoints.ok_or_else(|| bad("missing 'keypoints' line"))?;
        let mut resolved_names = Vec::with_capacity(num_keypoints);
        for (i, name) in names.into_iter().enumerate() {
            resolved_names.push(name.ok_or_else(|| bad(format!("keypoint {i} has no name")))?);
        }
        let skeleton = Skeleton {
            num_keypoints,
            names: resolved_names,
            edges,
            parts,
            flip_perm: flip_perm.unwrap_or_else(|| (0..num_keypoints).collect()),
            whole_part_weight,
            chains,
        };
        skeleton.validate()?;
        Ok(skeleton)
    }

    pub fn save(&self, path: &Path) -> Result<(), GeomError> {
        std::fs::write(path, self.to_text()).map_err(|e| bad(format!("write {path:?}: {e}")))
    }

    pub fn load(path: &Path) -> Result<Skeleton, GeomError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| bad(format!("read {path:?}: {e}")))?;
        Skeleton::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Skeleton {
        Skeleton {
            num_keypoints: 4,
            names: vec!["head".into(), "hip".into(), "left".into(), "right".into()],
            edges: vec![(0, 1), (1, 2), (1, 3)],
            parts: vec![
                Part { name: "upper".into(), members: vec![0, 1] },
                Part { name: "limbs".into(), members: vec![2, 3] },
            ],
            flip_perm: vec![0, 1, 3, 2],
            whole_part_weight: 0.1,
            chains: vec![vec![0, 1, 2]],
        }
    }

    #[test]
    fn round_trips_through_text() {
        let s = sample();
        let text = s.to_text();
        let back = Skeleton::from_text(&text).unwrap();
        assert_eq!(s, back);
        // Deterministic serialization.
        assert_eq!(text, back.to_text());
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("topo.txt");
        let s = sample();
        s.save(&path).unwrap();
        assert_eq!(Skeleton::load(&path).unwrap(), s);
    }

    #[test]
    fn tolerates_comments_and_blank_lines() {
        let text = "skeleton v1\n\n# topology\nkeypoints 2\nname 0 a\nname 1 b\nedge 0 1\nflip 1 0\n";
        let s = Skeleton::from_text(text).unwrap();
        assert_eq!(s.num_keypoints, 2);
        assert_eq!(s.whole_part_weight, 0.1, "weight defaults when absent");
    }

    #[test]
    fn missing_flip_defaults_to_identity() {
        let text = "skeleton v1\nkeypoints 3\nname 0 a\nname 1 b\nname 2 c\n";
        let s = Skeleton::from_text(text).unwrap();
        assert_eq!(s.flip_perm, vec![0, 1, 2]);
    }

    #[test]
    fn rejects_non_involution_flip() {
        let mut s = sample();
        s.flip_perm = vec![1, 2, 0, 3]; // a 3-cycle: permutation but not involution
        let err = s.validate().unwrap_err().to_string();
        assert!(err.contains("involution"), "unexpected error: {err}");
    }

    #[test]
    fn rejects_non_permutation_flip() {
        let mut s = sample();
        s.flip_perm = vec![0, 0, 2, 3];
        assert!(s.validate().is_err());
    }

    #[test]
    fn rejects_out_of_range_edge() {
        let mut s = sample();
        s.edges.push((1, 9));
        assert!(s.validate().is_err());
    }

    #[test]
    fn rejects_consecutive_chain_repeat() {
        let mut s = sample();
        s.chains = vec![vec![0, 1, 1, 2]];
        assert!(s.validate().is_err());
    }

    #[test]
    fn rejects_unnamed_keypoint() {
        let text = "skeleton v1\nkeypoints 2\nname 0 a\n";
        assert!(Skeleton::from_text(text).is_err());
    }

    #[test]
    fn rejects_unknown_directive() {
        let text = "skeleton v1\nkeypoints 1\nname 0 a\nbones 0 0\n";
        assert!(Skeleton::from_text(text).is_err());
    }
}
