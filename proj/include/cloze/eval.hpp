#pragma once

// Exact-match evaluation over a corpus, checkpoint accuracy series, and the
// cloze diagnostic that fills masked gold solutions. Perturbation lives with
// the template engine (corpus.hpp: perturb_dataset).

#include <optional>
#include <string>
#include <vector>

#include "cloze/corpus.hpp"
#include "cloze/decode.hpp"
#include "cloze/model.hpp"

namespace cloze {

// true iff both sides normalize to the same exact rational, or are
// byte-equal after normalization when non-numeric
bool exact_match(const std::optional<std::string>& predicted, const std::string& gold);

struct EvalVerdict {
    std::string id;
    std::optional<std::string> predicted;
    std::string gold;
    bool correct = false;
};

struct EvalReport {
    size_t n = 0;
    size_t correct = 0;
    double accuracy = 0.0;
    bool empty = false;
    std::vector<EvalVerdict> per_example;
    std::string config_hash;
    long long checkpoint_step = 0;
    std::string strategy;
    // training-loss components at this checkpoint, when known (for curves)
    double l_lm = 0.0;
    double l_infill = 0.0;
};

// Decodes each question from the prompt BOS + question and scores the
// extracted answer. prefix_prompt: the prompt attends bidirectionally
// (PrefixLM-trained models). Verifies the vocabulary fits the model and that
// every question is encodable before any decoding starts.
EvalReport evaluate(const Model& model, const Vocab& vocab, const std::vector<ProblemRecord>& dataset,
                    const DecodeConfig& decode_cfg, bool prefix_prompt, long long checkpoint_step);

// Diagnostic: prompts with the infilling layout over the gold solution
// (equations masked) and scores exact sentinel-target fills. Not an answer
// metric.
struct ClozeEvalReport {
    size_t records = 0;
    size_t spans_total = 0;
    size_t spans_filled_exact = 0;
    double span_accuracy = 0.0;
};
ClozeEvalReport evaluate_cloze(const Model& model, const Vocab& vocab,
                               const std::vector<ProblemRecord>& dataset, CorpusStyle style,
                               bool prefix_prompt, int max_new_tokens);

struct MetricPoint {
    long long step = 0;
    double accuracy = 0.0;
    double l_lm = 0.0;
    double l_infill = 0.0;
};
using MetricSeries = std::vector<MetricPoint>;

// eval report files: one JSON object per line per example, then a summary line
void write_eval_report(const std::string& path, const EvalReport& report);
EvalReport read_eval_report(const std::string& path);

// Collates (step, accuracy, losses) from the eval reports in a run
// directory (eval_step*.jsonl), sorted by step.
MetricSeries checkpoint_curve(const std::string& run_dir);

// tab-separated plot table: step, accuracy, l_lm, l_infill
void write_metric_series(const std::string& path, const MetricSeries& series);
MetricSeries read_metric_series(const std::string& path);

}  // namespace cloze
