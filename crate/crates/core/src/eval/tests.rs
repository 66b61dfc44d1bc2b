use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn w(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

#[test]
fn wer_examples() {
    assert_eq!(wer(&w("a b c"), &w("a b c")).unwrap().wer, 0.0);
    let r = wer(&w("a b c"), &w("a x c")).unwrap();
    assert_eq!((r.substitutions, r.insertions, r.deletions), (1, 0, 0));
    assert!((r.wer - 1.0 / 3.0).abs() < 1e-15);
    let r = wer(&w("a b"), &w("")).unwrap();
    assert_eq!((r.deletions, r.wer), (2, 1.0));
    let r = wer(&w("a"), &w("a b c")).unwrap();
    assert_eq!((r.insertions, r.wer), (2, 2.0));
    assert!(wer(&w(""), &w("a")).is_err());
}

#[test]
fn ties_prefer_substitution() {
    // Two substitutions and delete-plus-insert both cost 2.
    let r = wer(&w("a b"), &w("b a")).unwrap();
    assert_eq!((r.substitutions, r.insertions, r.deletions), (2, 0, 0));
    let r = wer(&w("a b c"), &w("x a b")).unwrap();
    assert_eq!((r.substitutions, r.insertions, r.deletions), (0, 1, 1));
}

/// Minimum edit cost by plain recursion over all alignments.
fn brute(r: &[String], h: &[String]) -> usize {
    match (r.split_first(), h.split_first()) {
        (None, _) => h.len(),
        (_, None) => r.len(),
        (Some((a, rr)), Some((b, hh))) => {
            let diag = brute(rr, hh) + usize::from(a != b);
            diag.min(brute(rr, h) + 1).min(brute(r, hh) + 1)
        }
    }
}

#[test]
fn wer_matches_exhaustive_alignment() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let alphabet = ["a", "b", "c"];
    let mut draw = |lo: usize| -> Vec<String> {
        let n = rng.gen_range(lo..=8);
        (0..n).map(|_| alphabet[rng.gen_range(0..3)].to_string()).collect()
    };
    for _ in 0..300 {
        let (r, h) = (draw(1), draw(0));
        let res = wer(&r, &h).unwrap();
        assert_eq!(res.errors(), brute(&r, &h), "{r:?} {h:?}");
        assert_eq!(r.len() - res.deletions + res.insertions, h.len());
        assert!(res.substitutions + res.deletions <= r.len());
        if !h.is_empty() {
            let back = wer(&h, &r).unwrap();
            assert_eq!(back.errors(), res.errors());
        }
        assert_eq!(wer(&r, &r).unwrap().errors(), 0);
    }
}

#[test]
fn merged_counts_pool_errors() {
    let a = wer(&w("a b c"), &w("a x c")).unwrap();
    let b = wer(&w("d"), &w("")).unwrap();
    let m = a.merge(&b);
    assert_eq!((m.errors(), m.ref_words), (2, 4));
    assert_eq!(m.wer, 0.5);
}

fn counts(pairs: &[(&str, usize)]) -> BTreeMap<String, usize> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

#[test]
fn categories_follow_the_count_rule() {
    let paired = counts(&[("the", 400), ("cat", 50), ("zyx", 3), ("qq", 1)]);
    let union = counts(&[("the", 9000), ("cat", 800), ("zyx", 50), ("qq", 4)]);
    assert_eq!(categorize(&w("the cat"), &paired, &union, 10), WordCategory::Common);
    assert_eq!(categorize(&w("the zyx"), &paired, &union, 10), WordCategory::FixedByLm);
    assert_eq!(categorize(&w("the qq zyx"), &paired, &union, 10), WordCategory::RareOov);
    assert_eq!(categorize(&w("the unseen"), &paired, &union, 10), WordCategory::RareOov);
    assert_eq!(categorize(&w("zyx"), &paired, &union, 60), WordCategory::RareOov);
}

fn fixture() -> (Vec<Reference>, SystemOutput, SystemOutput) {
    let refs = vec![
        Reference {
            id: "u1".into(),
            words: w("a b c"),
            category: WordCategory::Common,
        },
        Reference {
            id: "u2".into(),
            words: w("d e"),
            category: WordCategory::FixedByLm,
        },
        Reference {
            id: "u3".into(),
            words: w("f g h i"),
            category: WordCategory::RareOov,
        },
    ];
    let sys = |a: &str, b: &str, c: &str| -> SystemOutput {
        [("u1", a), ("u2", b), ("u3", c)]
            .iter()
            .map(|(id, h)| (id.to_string(), w(h)))
            .collect()
    };
    (refs, sys("a x c", "", "f g h i"), sys("a b c", "d", "f g h"))
}

#[test]
fn hand_built_report() {
    let (refs, base, sf) = fixture();
    let rep = breakdown_report(&refs, &base, &[("sf".into(), sf)]).unwrap();
    let rel = |name: &str| rep.row(name).unwrap().modes[0].relative_reduction;
    let close = |a: Option<f64>, b: f64| (a.unwrap() - b).abs() < 1e-12;
    // Baseline makes 3 errors over 9 words, fusion 2.
    assert!(close(rel("All"), 1.0 / 3.0));
    assert!(close(rel("Common"), 1.0));
    assert!(close(rel("Fixed-by-LM"), 0.5));
    assert_eq!(rel("Rare/OOV"), None);
    // Terciles by length: u2 (2 words), u1 (3), u3 (4).
    assert!(close(rel("Short"), 0.5));
    assert!(close(rel("Medium"), 1.0));
    assert_eq!(rel("Long"), None);
    assert_eq!(rep.row("All").unwrap().baseline.wer, 1.0 / 3.0);
    assert!(rep.to_tsv().contains("Fixed-by-LM\t1\t1\tsf\t0.5\t0.5\n"));
    assert!(rep.to_table().contains("Rare/OOV"));
}

#[test]
fn identical_systems_reduce_nothing() {
    let (refs, base, _) = fixture();
    let rep = breakdown_report(&refs, &base, &[("cf".into(), base.clone())]).unwrap();
    for r in &rep.rows {
        assert_eq!(r.modes[0].relative_reduction, Some(0.0), "{}", r.name);
    }
}

#[test]
fn categories_and_terciles_partition() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for n in 1..25 {
        let refs: Vec<Reference> = (0..n)
            .map(|i| Reference {
                id: format!("u{i:02}"),
                words: (0..rng.gen_range(1..6)).map(|_| "a".to_string()).collect(),
                category: WordCategory::ALL[rng.gen_range(0..3)],
            })
            .collect();
        let sys: SystemOutput = refs.iter().map(|r| (r.id.clone(), r.words.clone())).collect();
        let rep = breakdown_report(&refs, &sys, &[("sf".into(), sys.clone())]).unwrap();
        let sum = |names: &[&str]| -> usize { names.iter().map(|x| rep.row(x).unwrap().utterances).sum() };
        assert_eq!(sum(&["Common", "Fixed-by-LM", "Rare/OOV"]), n);
        assert_eq!(sum(&["Short", "Medium", "Long"]), n);
        let sizes: Vec<usize> = ["Short", "Medium", "Long"].iter().map(|x| rep.row(x).unwrap().utterances).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }
}

#[test]
fn terciles_keep_short_before_long() {
    let refs: Vec<Reference> = [("c", 5), ("a", 1), ("b", 1), ("d", 3)]
        .iter()
        .map(|(id, n)| Reference {
            id: id.to_string(),
            words: vec!["x".into(); *n],
            category: WordCategory::Common,
        })
        .collect();
    let t = terciles(&refs);
    assert_eq!(t["a"], LengthTercile::Short);
    assert_eq!(t["b"], LengthTercile::Short);
    assert_eq!(t["d"], LengthTercile::Medium);
    assert_eq!(t["c"], LengthTercile::Long);
}

#[test]
fn mismatched_ids_are_rejected() {
    let (refs, base, mut sf) = fixture();
    sf.remove("u2");
    sf.insert("u9".into(), w("a"));
    let err = breakdown_report(&refs, &base, &[("sf".into(), sf)]);
    assert!(matches!(err, Err(Error::IdMismatch(_))));
}
