use iecd2_core::metrics::{
    amber_generative, binary_scores, chair, AnnotationSet, Answer, CaptionRecord, YesNoRecord,
};
use proptest::prelude::*;

const WORDS: [&str; 8] = ["dog", "cat", "tree", "car", "bench", "kite", "cup", "horse"];

fn annotations(truth: &[Vec<usize>]) -> AnnotationSet {
    AnnotationSet::new(
        truth.iter().enumerate().map(|(i, objs)| {
            (format!("img{i}"), objs.iter().map(|o| WORDS[*o].to_string()).collect::<Vec<_>>())
        }),
        WORDS.iter().map(|w| (w.to_string(), w.to_string())),
        ["kite".to_string(), "horse".to_string()],
    )
    .unwrap()
}

fn captions(mentions: &[Vec<usize>]) -> Vec<CaptionRecord> {
    mentions
        .iter()
        .enumerate()
        .map(|(i, ws)| CaptionRecord {
            image_id: format!("img{i}"),
            caption: ws.iter().map(|w| WORDS[*w]).collect::<Vec<_>>().join(" and a "),
        })
        .collect()
}

fn fixture() -> impl Strategy<Value = (Vec<Vec<usize>>, Vec<Vec<usize>>)> {
    (1usize..8).prop_flat_map(|n| {
        (
            prop::collection::vec(prop::collection::vec(0usize..8, 0..5), n),
            prop::collection::vec(prop::collection::vec(0usize..8, 0..7), n),
        )
    })
}

fn answer(b: bool) -> Answer {
    if b {
        Answer::Yes
    } else {
        Answer::No
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn binary_scores_match_confusion_brute_force(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..60)) {
        let records: Vec<YesNoRecord> = pairs
            .iter()
            .enumerate()
            .map(|(i, (p, l))| YesNoRecord { question_id: i.to_string(), predicted: answer(*p), label: answer(*l) })
            .collect();
        let s = binary_scores(&records).unwrap();
        let count = |p: bool, l: bool| pairs.iter().filter(|x| **x == (p, l)).count() as f64;
        let (tp, fp, tn, fn_) = (count(true, true), count(true, false), count(false, false), count(false, true));
        let n = pairs.len() as f64;
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        prop_assert_eq!(s.accuracy, (tp + tn) / n);
        prop_assert_eq!(s.precision, precision);
        prop_assert_eq!(s.recall, recall);
        prop_assert_eq!(s.f1, f1);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn chair_values_in_unit_interval((truth, mentions) in fixture()) {
        let c = chair(&captions(&mentions), &annotations(&truth)).unwrap();
        prop_assert!((0.0..=1.0).contains(&c.chair_s));
        prop_assert!((0.0..=1.0).contains(&c.chair_i));
    }

    #[test]
    fn metrics_invariant_under_reordering((truth, mentions) in fixture(), rot in 0usize..8) {
        let a = annotations(&truth);
        let caps = captions(&mentions);
        let mut shuffled = caps.clone();
        shuffled.rotate_left(rot % caps.len());
        shuffled.reverse();
        let (x, y) = (chair(&caps, &a).unwrap(), chair(&shuffled, &a).unwrap());
        prop_assert!((x.chair_s - y.chair_s).abs() < 1e-12);
        prop_assert!((x.chair_i - y.chair_i).abs() < 1e-12);
        let (x, y) = (
            amber_generative(&caps, &a, a.target_list()).unwrap(),
            amber_generative(&shuffled, &a, a.target_list()).unwrap(),
        );
        for (p, q) in [(x.chair, y.chair), (x.cover, y.cover), (x.hal, y.hal), (x.cog, y.cog)] {
            prop_assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn removing_a_hallucinated_mention_never_raises_chair((truth, mentions) in fixture(), pick in any::<prop::sample::Index>()) {
        let a = annotations(&truth);
        let hallucinated: Vec<(usize, usize)> = mentions
            .iter()
            .enumerate()
            .flat_map(|(i, ws)| {
                let t = &truth[i];
                ws.iter().enumerate().filter(move |(_, w)| !t.contains(w)).map(move |(j, _)| (i, j))
            })
            .collect();
        prop_assume!(!hallucinated.is_empty());
        let (i, j) = hallucinated[pick.index(hallucinated.len())];
        let mut fewer = mentions.clone();
        fewer[i].remove(j);
        let before = chair(&captions(&mentions), &a).unwrap();
        let after = chair(&captions(&fewer), &a).unwrap();
        prop_assert!(after.chair_s <= before.chair_s + 1e-12);
        prop_assert!(after.chair_i <= before.chair_i + 1e-12);
    }

    #[test]
    fn adding_a_true_mention_never_lowers_cover((truth, mentions) in fixture(), pick in any::<prop::sample::Index>()) {
        let a = annotations(&truth);
        let candidates: Vec<(usize, usize)> = truth
            .iter()
            .enumerate()
            .flat_map(|(i, objs)| objs.iter().map(move |o| (i, *o)))
            .collect();
        prop_assume!(!candidates.is_empty());
        let (i, o) = candidates[pick.index(candidates.len())];
        let mut more = mentions.clone();
        more[i].push(o);
        let before = amber_generative(&captions(&mentions), &a, a.target_list()).unwrap();
        let after = amber_generative(&captions(&more), &a, a.target_list()).unwrap();
        prop_assert!(after.cover >= before.cover - 1e-9);
    }
}
