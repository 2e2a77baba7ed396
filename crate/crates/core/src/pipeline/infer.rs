use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::EvalRow;
use crate::encoder::{self, EmbeddingTable};
use crate::error::{Error, Result};
use crate::graph::{SplitSpec, TagGraph};
use crate::prompt::{self, IclExample, PromptTemplate, RenderOptions};
use crate::retriever::{self, RetrievalResult, STRATEGY_ASKGNN, STRATEGY_KNN};
use crate::scorer::{CompletionRequest, CompletionTask, Scorer};
use crate::trainer::TrainedModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    AskGnn,
    ZeroShot,
    FewRand,
    FewKnn,
    MvKnn,
    MvAskGnn,
    Npg,
    Npl,
}

impl Strategy {
    pub const ALL: [Strategy; 8] = [
        Strategy::AskGnn,
        Strategy::ZeroShot,
        Strategy::FewRand,
        Strategy::FewKnn,
        Strategy::MvKnn,
        Strategy::MvAskGnn,
        Strategy::Npg,
        Strategy::Npl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::AskGnn => "askgnn",
            Strategy::ZeroShot => "zero_shot",
            Strategy::FewRand => "few_rand",
            Strategy::FewKnn => "few_knn",
            Strategy::MvKnn => "mv_knn",
            Strategy::MvAskGnn => "mv_askgnn",
            Strategy::Npg => "npg",
            Strategy::Npl => "npl",
        }
    }

    pub fn needs_model(self) -> bool {
        matches!(self, Strategy::AskGnn | Strategy::MvAskGnn | Strategy::Npg)
    }

    /// Majority-vote strategies answer without the language model.
    pub fn is_vote(self) -> bool {
        matches!(self, Strategy::MvKnn | Strategy::MvAskGnn)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown strategy {s:?}")))
    }
}

/// Post-retrieval filtering of the example set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum PurifyMode {
    None,
    Minority { min_count: usize },
    LlmSelect { budget: usize },
}

impl FromStr for PurifyMode {
    type Err = Error;

    /// `none`, `minority[:N]` (default 2) or `llm:N`.
    fn from_str(s: &str) -> Result<Self> {
        let (head, arg) = match s.split_once(':') {
            Some((h, a)) => (h, Some(a)),
            None => (s, None),
        };
        let num = |a: Option<&str>| -> Result<Option<usize>> {
            a.map(|v| v.parse().map_err(|_| Error::InvalidArgument(format!("bad number in {s:?}"))))
                .transpose()
        };
        match head {
            "none" if arg.is_none() => Ok(PurifyMode::None),
            "minority" => {
                let min_count = num(arg)?.unwrap_or(2);
                if min_count == 0 {
                    return Err(Error::InvalidArgument("min_count must be at least 1".into()));
                }
                Ok(PurifyMode::Minority { min_count })
            }
            "llm" => match num(arg)? {
                Some(budget) => Ok(PurifyMode::LlmSelect { budget }),
                None => Err(Error::InvalidArgument("llm purification needs a budget, e.g. llm:10".into())),
            },
            _ => Err(Error::InvalidArgument(format!("unknown purification {s:?}"))),
        }
    }
}

struct Answer {
    /// Predicted class, or why there is none.
    outcome: std::result::Result<usize, String>,
    /// Examples actually shown (or voted over).
    n_icl: usize,
    /// Set when purification fell back to rank order.
    note: Option<String>,
}

pub struct InferSetup<'a> {
    pub graph: &'a TagGraph,
    pub split: &'a SplitSpec,
    pub scorer: &'a dyn Scorer,
    pub template: &'a PromptTemplate,
    pub render: RenderOptions,
    pub k_icl: usize,
    pub purify: PurifyMode,
    /// Seeds random example selection.
    pub seed: u64,
    pub single_thread: bool,
}

impl InferSetup<'_> {
    fn pool(&self) -> Result<rayon::ThreadPool> {
        let threads = if self.single_thread { 1 } else { self.scorer.max_parallel().max(1) };
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("cannot start inference pool: {e}")))
    }

    fn label_name(&self, c: usize) -> &str {
        &self.graph.label_vocab()[c]
    }

    fn labeled_examples(&self, r: RetrievalResult) -> Vec<IclExample> {
        r.hits
            .into_iter()
            .filter_map(|(node, _)| self.graph.label(node).map(|label| IclExample { node, label }))
            .collect()
    }

    fn retrieved(&self, table: &EmbeddingTable, tag: &str) -> Result<Vec<Vec<IclExample>>> {
        let tests = self.split.test_ids();
        if self.k_icl == 0 {
            return Ok(vec![Vec::new(); tests.len()]);
        }
        let index = retriever::build_index_tagged(table, self.split.labeled_ids(), tag)?;
        let results = retriever::retrieve_many(&index, table, tests, self.k_icl)?;
        Ok(results.into_iter().map(|r| self.labeled_examples(r)).collect())
    }

    fn neighbors(&self, q: usize) -> Result<Vec<usize>> {
        Ok(self.graph.neighbors(q)?.iter().copied().take(self.k_icl).collect())
    }

    /// Classifies `query` with `examples` shown.
    fn ask(&self, query: usize, examples: &[IclExample]) -> Answer {
        let (examples, note) = match self.purify {
            PurifyMode::None => (examples.to_vec(), None),
            PurifyMode::Minority { min_count } => (prompt::purify_minority(examples, min_count), None),
            PurifyMode::LlmSelect { budget } => {
                let shown: Vec<(&str, &str)> =
                    examples.iter().map(|e| (self.graph.text(e.node), self.label_name(e.label))).collect();
                let text = prompt::selection_prompt(&shown, self.graph.text(query), budget, &self.render);
                let reply = self.scorer.complete(&CompletionRequest {
                    query,
                    examples,
                    prompt: &text,
                    task: CompletionTask::Select { budget },
                });
                let sel = prompt::apply_selection(examples, reply.as_deref().ok(), budget);
                let note = sel.fell_back.then(|| match &reply {
                    Err(e) => format!("selection failed ({e}); kept rank order"),
                    Ok(_) => "selection unparsed; kept rank order".to_string(),
                });
                (sel.examples, note)
            }
        };
        let shown: Vec<(&str, &str)> =
            examples.iter().map(|e| (self.graph.text(e.node), self.label_name(e.label))).collect();
        let rendered = prompt::render(self.template, &shown, self.graph.text(query), &self.render);
        let used = &examples[..rendered.n_examples];
        let reply = self.scorer.complete(&CompletionRequest {
            query,
            examples: used,
            prompt: &rendered.text,
            task: CompletionTask::Classify,
        });
        let outcome = match reply {
            Err(e) => Err(e.to_string()),
            Ok(text) => prompt::parse_answer(&text, self.graph.label_vocab())
                .ok_or_else(|| format!("no label in completion {:?}", text.chars().take(80).collect::<String>())),
        };
        Answer {
            outcome,
            n_icl: rendered.n_examples,
            note,
        }
    }

    /// Zero-shot predictions for `nodes`, each asked once.
    fn zero_shot_labels(&self, pool: &rayon::ThreadPool, nodes: &[usize]) -> BTreeMap<usize, usize> {
        let answers: Vec<(usize, Option<usize>)> =
            pool.install(|| nodes.par_iter().map(|&n| (n, self.ask(n, &[]).outcome.ok())).collect());
        answers.into_iter().filter_map(|(n, a)| a.map(|c| (n, c))).collect()
    }
}

/// Evaluates `strategy` on every test query of the split.
pub fn run_strategy(setup: &InferSetup<'_>, strategy: Strategy, model: Option<&TrainedModel>) -> Result<Vec<EvalRow>> {
    let model = match (strategy.needs_model(), model) {
        (true, None) => return Err(Error::InvalidArgument(format!("strategy {strategy} needs a trained model"))),
        (_, m) => m,
    };
    let tests = setup.split.test_ids();
    let pool = setup.pool()?;
    let examples: Vec<Vec<IclExample>> = match strategy {
        Strategy::AskGnn | Strategy::MvAskGnn => {
            setup.retrieved(&model.expect("checked").embeddings, STRATEGY_ASKGNN)?
        }
        Strategy::FewKnn | Strategy::MvKnn => {
            setup.retrieved(&EmbeddingTable::from_features(setup.graph), STRATEGY_KNN)?
        }
        Strategy::ZeroShot => vec![Vec::new(); tests.len()],
        Strategy::FewRand => tests
            .iter()
            .map(|&q| {
                if setup.k_icl == 0 {
                    return Ok(Vec::new());
                }
                let r = retriever::random_examples(setup.split.labeled_ids(), q, setup.k_icl, setup.seed)?;
                Ok(setup.labeled_examples(r))
            })
            .collect::<Result<_>>()?,
        Strategy::Npg => {
            let m = model.expect("checked");
            let pseudo = encoder::argmax_rows(&encoder::classify_logits(&m.embeddings, &m.params)?);
            tests
                .iter()
                .map(|&q| {
                    Ok(setup
                        .neighbors(q)?
                        .into_iter()
                        .map(|node| IclExample { node, label: pseudo[node] })
                        .collect())
                })
                .collect::<Result<_>>()?
        }
        Strategy::Npl => {
            let lists: Vec<Vec<usize>> = tests.iter().map(|&q| setup.neighbors(q)).collect::<Result<_>>()?;
            let mut distinct: Vec<usize> = lists.iter().flatten().copied().collect();
            distinct.sort_unstable();
            distinct.dedup();
            let pseudo = setup.zero_shot_labels(&pool, &distinct);
            lists
                .into_iter()
                .map(|l| {
                    l.into_iter()
                        .filter_map(|node| pseudo.get(&node).map(|&label| IclExample { node, label }))
                        .collect()
                })
                .collect()
        }
    };

    let answers: Vec<Answer> = if strategy.is_vote() {
        examples
            .iter()
            .map(|ex| {
                let labels: Vec<usize> = ex.iter().map(|e| e.label).collect();
                Answer {
                    outcome: prompt::majority_vote(&labels).map_err(|_| "no examples to vote over".to_string()),
                    n_icl: ex.len(),
                    note: None,
                }
            })
            .collect()
    } else {
        pool.install(|| {
            tests
                .par_iter()
                .zip(examples.par_iter())
                .map(|(&q, ex)| setup.ask(q, ex))
                .collect()
        })
    };

    let ids = setup.graph.node_ids();
    tests
        .iter()
        .zip(answers)
        .map(|(&q, a)| {
            let gold = setup
                .graph
                .label(q)
                .ok_or_else(|| Error::InvalidArgument(format!("test node {} has no gold label", ids[q])))?;
            let (predicted, reason) = match a.outcome {
                Ok(c) => (Some(setup.label_name(c).to_string()), a.note),
                Err(r) => (None, Some(match a.note {
                    Some(n) => format!("{r}; {n}"),
                    None => r,
                })),
            };
            Ok(EvalRow {
                query_id: ids[q],
                gold: setup.label_name(gold).to_string(),
                parsed: predicted.is_some(),
                predicted,
                strategy: strategy.name().to_string(),
                n_icl: a.n_icl,
                reason,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicU64, Ordering};

    use super::*;
    use crate::error::ScorerError;
    use crate::graph::tests::toy_graph;
    use crate::scorer::ScoreRequest;

    struct Fixed {
        reply: String,
        calls: AtomicU64,
    }

    impl Fixed {
        fn new(reply: &str) -> Self {
            Self {
                reply: reply.into(),
                calls: AtomicU64::new(0),
            }
        }
    }

    impl Scorer for Fixed {
        fn scorer_id(&self) -> &str {
            "fixed"
        }
        fn token_logprobs(&self, _: &ScoreRequest<'_>) -> std::result::Result<Vec<f64>, ScorerError> {
            Err(ScorerError::NoLogprobs)
        }
        fn complete(&self, _: &CompletionRequest<'_>) -> std::result::Result<String, ScorerError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            Ok(self.reply.clone())
        }
        fn call_count(&self) -> u64 {
            self.calls.load(Ordering::SeqCst)
        }
        fn max_parallel(&self) -> usize {
            2
        }
    }

    fn setup<'a>(g: &'a TagGraph, split: &'a SplitSpec, scorer: &'a dyn Scorer, t: &'a PromptTemplate, k: usize) -> InferSetup<'a> {
        InferSetup {
            graph: g,
            split,
            scorer,
            template: t,
            render: RenderOptions::default(),
            k_icl: k,
            purify: PurifyMode::None,
            seed: 3,
            single_thread: true,
        }
    }

    #[test]
    fn parse_names() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!("gnn".parse::<Strategy>().is_err());
        assert_eq!("none".parse::<PurifyMode>().unwrap(), PurifyMode::None);
        assert_eq!("minority".parse::<PurifyMode>().unwrap(), PurifyMode::Minority { min_count: 2 });
        assert_eq!("minority:3".parse::<PurifyMode>().unwrap(), PurifyMode::Minority { min_count: 3 });
        assert_eq!("llm:5".parse::<PurifyMode>().unwrap(), PurifyMode::LlmSelect { budget: 5 });
        for bad in ["llm", "minority:0", "minority:x", "none:1", "other"] {
            assert!(bad.parse::<PurifyMode>().is_err(), "{bad}");
        }
    }

    #[test]
    fn vote_makes_no_calls_and_llm_rows_cover_tests() {
        // toy labels alternate A, B; node 4 (A) sees 0, 2 (A) and 1 (B)
        let g = toy_graph(6, &[(4, 0), (4, 1), (4, 2)], false);
        let split = SplitSpec::new(vec![0, 1, 2, 3], vec![0, 1, 2, 3], vec![4, 5], 1.0, 0).unwrap();
        let t = PromptTemplate::builtin("generic").unwrap();
        let scorer = Fixed::new("A");
        let s = setup(&g, &split, &scorer, &t, 3);
        let rows = run_strategy(&s, Strategy::MvKnn, None).unwrap();
        assert_eq!(scorer.call_count(), 0);
        assert_eq!(rows.len(), 2);
        let rows = run_strategy(&s, Strategy::FewRand, None).unwrap();
        assert_eq!(scorer.call_count(), 2);
        assert!(rows.iter().all(|r| r.predicted.as_deref() == Some("A") && r.n_icl == 3));
        let zero = run_strategy(&setup(&g, &split, &scorer, &t, 0), Strategy::FewKnn, None).unwrap();
        assert!(zero.iter().all(|r| r.n_icl == 0));
        assert!(run_strategy(&s, Strategy::AskGnn, None).is_err());
    }

    #[test]
    fn npl_uses_zero_shot_pseudo_labels() {
        let g = toy_graph(6, &[(4, 0), (4, 1), (4, 3), (5, 1)], false);
        let split = SplitSpec::new(vec![0, 1, 2, 3], vec![0, 1, 2, 3], vec![4, 5], 1.0, 0).unwrap();
        let t = PromptTemplate::builtin("generic").unwrap();
        let scorer = Fixed::new("answer: B");
        let s = InferSetup {
            purify: PurifyMode::Minority { min_count: 2 },
            ..setup(&g, &split, &scorer, &t, 30)
        };
        let rows = run_strategy(&s, Strategy::Npl, None).unwrap();
        // 3 distinct neighbors asked once each, then one call per test query
        assert_eq!(scorer.call_count(), 3 + 2);
        assert_eq!(rows[0].n_icl, 3);
        assert_eq!(rows[1].n_icl, 1);
        assert!(rows.iter().all(|r| r.predicted.as_deref() == Some("B")));
        assert_eq!(rows[1].gold, "B");
        assert!(rows[1].is_correct() && !rows[0].is_correct());
    }

    #[test]
    fn unparsed_and_selection_fallback_are_reported() {
        let g = toy_graph(6, &[], false);
        let split = SplitSpec::new(vec![0, 1, 2, 3], vec![0, 1, 2, 3], vec![4, 5], 1.0, 0).unwrap();
        let t = PromptTemplate::builtin("generic").unwrap();
        let scorer = Fixed::new("banana");
        let s = InferSetup {
            purify: PurifyMode::LlmSelect { budget: 2 },
            ..setup(&g, &split, &scorer, &t, 3)
        };
        let rows = run_strategy(&s, Strategy::FewKnn, None).unwrap();
        for r in &rows {
            assert!(!r.parsed && r.predicted.is_none());
            assert_eq!(r.n_icl, 2);
            let reason = r.reason.as_deref().unwrap();
            assert!(reason.contains("no label") && reason.contains("rank order"), "{reason}");
        }
    }
}
