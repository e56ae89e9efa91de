//! Brute-force reference implementations the library metrics are checked
//! against. None of them share code with the library versions.

use std::collections::VecDeque;

pub const ALPHABET: usize = 6;
pub const MAX_LEN: usize = 6;

/// Dense index of every string over `0..ALPHABET` of length `<= MAX_LEN`.
pub struct StringSpace {
    offsets: Vec<usize>,
}

impl StringSpace {
    pub fn new() -> Self {
        let mut offsets = vec![0];
        for len in 0..=MAX_LEN {
            offsets.push(offsets[len] + ALPHABET.pow(len as u32));
        }
        StringSpace { offsets }
    }

    pub fn size(&self) -> usize {
        self.offsets[MAX_LEN + 1]
    }

    pub fn index(&self, s: &[u8]) -> usize {
        self.offsets[s.len()] + s.iter().fold(0, |acc, &c| acc * ALPHABET + c as usize)
    }

    pub fn decode(&self, idx: usize) -> Vec<u8> {
        let len = (0..=MAX_LEN)
            .rev()
            .find(|&l| self.offsets[l] <= idx)
            .expect("index in range");
        let mut v = idx - self.offsets[len];
        let mut s = vec![0u8; len];
        for slot in s.iter_mut().rev() {
            *slot = (v % ALPHABET) as u8;
            v /= ALPHABET;
        }
        s
    }

    fn neighbours(&self, s: &[u8], out: &mut Vec<usize>) {
        out.clear();
        let mut t = Vec::with_capacity(MAX_LEN);
        for i in 0..s.len() {
            t.clear();
            t.extend_from_slice(&s[..i]);
            t.extend_from_slice(&s[i + 1..]);
            out.push(self.index(&t));
            for c in 0..ALPHABET as u8 {
                if c != s[i] {
                    t.clear();
                    t.extend_from_slice(s);
                    t[i] = c;
                    out.push(self.index(&t));
                }
            }
            if i + 1 < s.len() && s[i] != s[i + 1] {
                t.clear();
                t.extend_from_slice(s);
                t.swap(i, i + 1);
                out.push(self.index(&t));
            }
        }
        if s.len() < MAX_LEN {
            for i in 0..=s.len() {
                for c in 0..ALPHABET as u8 {
                    t.clear();
                    t.extend_from_slice(&s[..i]);
                    t.push(c);
                    t.extend_from_slice(&s[i..]);
                    out.push(self.index(&t));
                }
            }
        }
    }

    /// Fewest single edits (insert, delete, substitute, swap two adjacent
    /// symbols) from `source` to every string in the space.
    pub fn bfs(&self, source: &[u8]) -> Vec<u8> {
        let mut dist = vec![u8::MAX; self.size()];
        let start = self.index(source);
        dist[start] = 0;
        let mut queue = VecDeque::from([start]);
        let mut nb = Vec::new();
        while let Some(u) = queue.pop_front() {
            let s = self.decode(u);
            self.neighbours(&s, &mut nb);
            for &v in &nb {
                if dist[v] == u8::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        dist
    }
}

/// Strings whose symbols first appear in the order 0, 1, 2, ... Every
/// string is a relabeling of exactly one of these, and edit distance is
/// invariant under relabeling.
pub fn canonical_strings(max_len: usize, alphabet: usize) -> Vec<Vec<u8>> {
    fn grow(cur: &mut Vec<u8>, max_len: usize, alphabet: usize, out: &mut Vec<Vec<u8>>) {
        out.push(cur.clone());
        if cur.len() == max_len {
            return;
        }
        let used = cur.iter().map(|&c| c as usize + 1).max().unwrap_or(0);
        for c in 0..=used.min(alphabet - 1) {
            cur.push(c as u8);
            grow(cur, max_len, alphabet, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    grow(&mut Vec::new(), max_len, alphabet, &mut out);
    out
}

/// Pixel-count IoU of two boolean grids inside `region` (all pixels when
/// `None`); `None` for an empty union.
pub fn brute_iou(pred: &[bool], gt: &[bool], region: Option<&[bool]>) -> Option<f64> {
    let mut inter = 0u64;
    let mut union = 0u64;
    for i in 0..pred.len() {
        if let Some(r) = region {
            if !r[i] {
                continue;
            }
        }
        if pred[i] && gt[i] {
            inter += 1;
        }
        if pred[i] || gt[i] {
            union += 1;
        }
    }
    (union > 0).then(|| inter as f64 / union as f64)
}

/// Average precision by explicit rank computation: the rank of item `i` is
/// one plus the number of items scored higher or scored equal and listed
/// earlier.
pub fn enumerated_ap(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let n = scores.len();
    let rank = |i: usize| {
        1 + (0..n)
            .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
            .count()
    };
    let mut terms: Vec<(usize, f64)> = (0..n)
        .filter(|&i| labels[i])
        .map(|i| {
            let r = rank(i);
            let hits = (0..n).filter(|&j| labels[j] && rank(j) <= r).count();
            (r, hits as f64 / r as f64)
        })
        .collect();
    if terms.is_empty() {
        return None;
    }
    terms.sort_by_key(|t| t.0);
    Some(terms.iter().map(|t| t.1).sum::<f64>() / terms.len() as f64)
}
