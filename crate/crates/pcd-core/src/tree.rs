//! Landmark tree layouts: nodes are keypoints, edges are message-passing
//! links, the root sits at the nose tip. Three configurations ship: a
//! 21-point layout, a 29-point layout, and a 68-point layout, plus the split
//! maps used to grow a 21-point model onto the larger trees.

use crate::error::{Error, Result};

/// A rooted tree over landmark indices with a left/right flip permutation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DendriticTree {
    name: String,
    landmark_names: Vec<String>,
    edges: Vec<(usize, usize)>,
    root: usize,
    flip: Vec<usize>,
}

impl DendriticTree {
    pub fn new(
        name: impl Into<String>,
        landmark_names: Vec<String>,
        edges: Vec<(usize, usize)>,
        root: usize,
        flip: Vec<usize>,
    ) -> Result<Self> {
        let t = DendriticTree { name: name.into(), landmark_names, edges, root, flip };
        t.validate()?;
        Ok(t)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn n(&self) -> usize {
        self.landmark_names.len()
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn landmark_name(&self, i: usize) -> &str {
        &self.landmark_names[i]
    }

    /// Undirected edge list, |edges| == n−1.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Both directions of every edge as (source, destination) pairs, in a
    /// stable order: for edge (a, b), a→b comes before b→a.
    pub fn directed_edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(2 * self.edges.len());
        for &(a, b) in &self.edges {
            out.push((a, b));
            out.push((b, a));
        }
        out
    }

    /// The flip permutation: index of the landmark that takes this
    /// landmark's place when the image is mirrored horizontally.
    pub fn flip(&self) -> &[usize] {
        &self.flip
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if n == 0 {
            return Err(Error::config("tree has no landmarks"));
        }
        if self.root >= n {
            return Err(Error::config(format!("root {} out of range for {} nodes", self.root, n)));
        }
        if self.edges.len() != n - 1 {
            return Err(Error::config(format!(
                "tree {}: {} edges for {} nodes (want n-1)",
                self.name,
                self.edges.len(),
                n
            )));
        }
        for &(a, b) in &self.edges {
            if a >= n || b >= n || a == b {
                return Err(Error::config(format!("tree {}: bad edge ({}, {})", self.name, a, b)));
            }
        }
        // n-1 edges and full reachability from the root together imply
        // connectivity and acyclicity.
        let mut adj = vec![Vec::new(); n];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut seen = vec![false; n];
        let mut stack = vec![self.root];
        seen[self.root] = true;
        while let Some(i) = stack.pop() {
            for &j in &adj[i] {
                if !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::config(format!("tree {} is not connected", self.name)));
        }
        if self.flip.len() != n {
            return Err(Error::config(format!("tree {}: flip permutation length mismatch", self.name)));
        }
        for (i, &f) in self.flip.iter().enumerate() {
            if f >= n {
                return Err(Error::config(format!("tree {}: flip[{}] out of range", self.name, i)));
            }
            if self.flip[f] != i {
                return Err(Error::config(format!(
                    "tree {}: flip is not an involution at {} -> {} -> {}",
                    self.name, i, f, self.flip[f]
                )));
            }
        }
        Ok(())
    }

    /// 21-point layout: brows (3 per side), eyes (3 per side), ears, nose
    /// (3), mouth (3), chin. Root at the nose center.
    pub fn aflw21() -> Self {
        let names = [
            "l_brow_out", "l_brow_ctr", "l_brow_in", // 0 1 2
            "r_brow_in", "r_brow_ctr", "r_brow_out", // 3 4 5
            "l_eye_out", "l_eye_ctr", "l_eye_in", // 6 7 8
            "r_eye_in", "r_eye_ctr", "r_eye_out", // 9 10 11
            "l_ear", "nose_l", "nose_ctr", "nose_r", "r_ear", // 12 13 14 15 16
            "mouth_l", "mouth_ctr", "mouth_r", "chin", // 17 18 19 20
        ];
        let edges = vec![
            (14, 13),
            (14, 15),
            (14, 7),
            (14, 10),
            (14, 18),
            (7, 6),
            (7, 8),
            (7, 1),
            (1, 0),
            (1, 2),
            (6, 12),
            (10, 9),
            (10, 11),
            (10, 4),
            (4, 3),
            (4, 5),
            (11, 16),
            (18, 17),
            (18, 19),
            (18, 20),
        ];
        let flip = vec![5, 4, 3, 2, 1, 0, 11, 10, 9, 8, 7, 6, 16, 15, 14, 13, 12, 19, 18, 17, 20];
        Self::new("aflw21", names.iter().map(|s| s.to_string()).collect(), edges, 14, flip)
            .expect("shipped tree is valid")
    }

    /// 29-point occlusion-task layout: brows (4 per side), eyes with pupils
    /// (5 per side), nose (4), mouth (6), chin. Root at the nose tip.
    pub fn cofw29() -> Self {
        let names = [
            "l_brow_out", "l_brow_up", "l_brow_in", "l_brow_low", // 0-3
            "r_brow_in", "r_brow_up", "r_brow_out", "r_brow_low", // 4-7
            "l_eye_out", "l_eye_up", "l_eye_in", "l_eye_low", "l_pupil", // 8-12
            "r_eye_in", "r_eye_up", "r_eye_out", "r_eye_low", "r_pupil", // 13-17
            "nose_l", "nose_tip", "nose_r", "nose_base", // 18-21
            "mouth_l", "mouth_r", "mouth_up_out", "mouth_up_in", "mouth_low_in",
            "mouth_low_out", // 22-27
            "chin", // 28
        ];
        let edges = vec![
            (19, 18),
            (19, 20),
            (19, 21),
            (19, 10),
            (19, 13),
            (10, 9),
            (9, 8),
            (10, 11),
            (10, 12),
            (13, 14),
            (14, 15),
            (13, 16),
            (13, 17),
            (10, 2),
            (13, 4),
            (2, 1),
            (1, 0),
            (2, 3),
            (4, 5),
            (5, 6),
            (4, 7),
            (21, 24),
            (24, 22),
            (24, 23),
            (24, 25),
            (25, 26),
            (26, 27),
            (27, 28),
        ];
        let flip = vec![
            6, 5, 4, 7, // brows
            2, 1, 0, 3, //
            15, 14, 13, 16, 17, // eyes
            10, 9, 8, 11, 12, //
            20, 19, 18, 21, // nose
            23, 22, 24, 25, 26, 27, // mouth
            28, // chin
        ];
        Self::new("cofw29", names.iter().map(|s| s.to_string()).collect(), edges, 19, flip)
            .expect("shipped tree is valid")
    }

    /// 68-point layout: jaw chain (17), brows (5 per side), nose bridge and
    /// nostrils (9), eyes (6 per side), outer lip (12), inner lip (8). Root
    /// at the nose tip (index 30).
    pub fn ibug68() -> Self {
        let mut names: Vec<String> = Vec::with_capacity(68);
        for i in 0..17 {
            names.push(format!("jaw_{}", i));
        }
        for i in 0..5 {
            names.push(format!("l_brow_{}", i));
        }
        for i in 0..5 {
            names.push(format!("r_brow_{}", i));
        }
        for i in 0..4 {
            names.push(format!("bridge_{}", i));
        }
        for i in 0..5 {
            names.push(format!("nostril_{}", i));
        }
        for i in 0..6 {
            names.push(format!("l_eye_{}", i));
        }
        for i in 0..6 {
            names.push(format!("r_eye_{}", i));
        }
        for i in 0..12 {
            names.push(format!("lip_out_{}", i));
        }
        for i in 0..8 {
            names.push(format!("lip_in_{}", i));
        }
        let mut edges = vec![
            // nose bridge up from the root
            (30, 29),
            (29, 28),
            (28, 27),
            // nostril arc
            (30, 33),
            (33, 32),
            (32, 31),
            (33, 34),
            (34, 35),
            // inner eye corners hang off the bridge top
            (27, 39),
            (27, 42),
            // eye contours
            (39, 38),
            (38, 37),
            (37, 36),
            (36, 41),
            (41, 40),
            (42, 43),
            (43, 44),
            (44, 45),
            (45, 46),
            (46, 47),
            // brows hang off the inner eye corners
            (39, 21),
            (42, 22),
            (21, 20),
            (20, 19),
            (19, 18),
            (18, 17),
            (22, 23),
            (23, 24),
            (24, 25),
            (25, 26),
            // upper outer lip off the nostril arc
            (33, 51),
            (51, 50),
            (50, 49),
            (49, 48),
            (51, 52),
            (52, 53),
            (53, 54),
            // lower outer lip
            (51, 57),
            (57, 56),
            (56, 55),
            (57, 58),
            (58, 59),
            // inner lip
            (51, 62),
            (62, 61),
            (61, 60),
            (62, 63),
            (63, 64),
            (62, 66),
            (66, 65),
            (66, 67),
            // chin attaches the jaw chain
            (57, 8),
        ];
        for i in 0..16 {
            edges.push((i, i + 1));
        }
        let mut flip: Vec<usize> = (0..68).collect();
        let mut swap = |a: usize, b: usize| {
            flip[a] = b;
            flip[b] = a;
        };
        for i in 0..8 {
            swap(i, 16 - i); // jaw
        }
        for i in 0..5 {
            swap(17 + i, 26 - i); // brows
        }
        swap(31, 35);
        swap(32, 34); // nostrils
        swap(36, 45);
        swap(37, 44);
        swap(38, 43);
        swap(39, 42);
        swap(40, 47);
        swap(41, 46); // eyes
        swap(48, 54);
        swap(49, 53);
        swap(50, 52);
        swap(55, 59);
        swap(56, 58); // outer lip
        swap(60, 64);
        swap(61, 63);
        swap(65, 67); // inner lip
        Self::new("ibug68", names, edges, 30, flip).expect("shipped tree is valid")
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "aflw21" => Ok(Self::aflw21()),
            "cofw29" => Ok(Self::cofw29()),
            "ibug68" => Ok(Self::ibug68()),
            other => Err(Error::config(format!(
                "unknown tree '{}' (available: aflw21, cofw29, ibug68)",
                other
            ))),
        }
    }
}

/// Split map for growing a model: `map[target_node] = source_node`. Ships
/// for the 21→29 and 21→68 pairs; identical trees map by identity.
pub fn split_map(source: &DendriticTree, target: &DendriticTree) -> Result<Vec<usize>> {
    match (source.name(), target.name()) {
        (a, b) if a == b => Ok((0..source.n()).collect()),
        ("aflw21", "cofw29") => Ok(vec![
            0, 1, 2, 1, // left brow from 3 brow points
            3, 4, 5, 4, // right brow
            6, 7, 8, 7, 7, // left eye ring + pupil from eye points
            9, 10, 11, 10, 10, // right eye
            13, 14, 15, 14, // nose
            17, 19, 18, 18, 18, 18, // mouth ring from 3 mouth points
            20, // chin
        ]),
        ("aflw21", "ibug68") => {
            let mut m = Vec::with_capacity(68);
            // jaw: upper sides from the ears, middle from the chin
            m.extend([12, 12, 12, 12]); // 0-3
            m.extend([20, 20, 20, 20, 20, 20, 20, 20, 20]); // 4-12
            m.extend([16, 16, 16, 16]); // 13-16
            // brows from the 3-point brows
            m.extend([0, 1, 1, 2, 2]); // 17-21
            m.extend([3, 3, 4, 4, 5]); // 22-26
            // bridge from the nose center
            m.extend([14, 14, 14, 14]); // 27-30
            // nostril arc
            m.extend([13, 13, 14, 15, 15]); // 31-35
            // eyes from the 3-point eyes
            m.extend([6, 7, 7, 8, 7, 7]); // 36-41
            m.extend([9, 10, 10, 11, 10, 10]); // 42-47
            // outer lip from mouth corners and center
            m.extend([17, 18, 18, 18, 18, 18, 19, 18, 18, 18, 18, 18]); // 48-59
            // inner lip
            m.extend([17, 18, 18, 18, 19, 18, 18, 18]); // 60-67
            Ok(m)
        }
        (a, b) => Err(Error::config(format!("no split map shipped for {} -> {}", a, b))),
    }
}
