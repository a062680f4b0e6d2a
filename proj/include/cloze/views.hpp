#pragma once

// Builders for the four training views (equation infilling, plain LM, MFT
// token noising, random-span infilling) and the PrefixLM/CausalLM attention
// specification.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cloze/common.hpp"
#include "cloze/corpus.hpp"
#include "cloze/tokenizer.hpp"

namespace cloze {

constexpr TokenId kIgnoreLabel = -100;

enum class ViewKind { clozemath_infill, lm, mft, random_span_infill };

std::string to_string(ViewKind k);
ViewKind view_kind_from_string(const std::string& s);

enum class AttnMode { prefix, causal };

std::string to_string(AttnMode m);
AttnMode attn_mode_from_string(const std::string& s);

// labels[i] is the token to be predicted at index i (scored against the
// logits at index i-1) or kIgnoreLabel. A non-IGNORE label never sits on a
// question-token position, and when prefix_len > 0 all labels lie at
// indices >= prefix_len.
struct TrainingView {
    ViewKind kind = ViewKind::lm;
    std::vector<TokenId> input_ids;
    std::vector<TokenId> labels;
    int prefix_len = 0;  // 0 means fully causal
    std::string source_id;
    int span_count = 0;
    int masked_tokens = 0;
};

bool is_infill_kind(ViewKind k);  // contributes to L_infill rather than L_lm

struct AttentionSpec {
    int seq_len = 0;
    int prefix_len = 0;  // 0 <= prefix_len <= seq_len
};

struct ViewConfig {
    double mft_p = 0.2;
    double short_span_rate = 0.15;
    double long_span_rate = 0.50;
    int span_len_short = 3;
    int span_len_long = 10;
    int sentinel_budget = 32;  // K; solutions with more equations are skipped
    double lambda_infill = 1.0;
    bool mask_all_equations = true;
    double equation_mask_prob = 1.0;  // per-span keep probability when mask_all_equations is off
    uint64_t rng_seed = 0;
};

enum class SpanLengthClass { short_spans, long_spans };

// allowed[i][j] = (j <= i) or (j < prefix_len)
std::vector<std::vector<bool>> build_attention_mask(const AttentionSpec& spec);

// Serialization: BOS q masked-solution SEP [sentinel_i span_i]... EOS, with
// the whole masked context (through SEP) in the bidirectional prefix.
// Returns nullopt when the span count exceeds the sentinel budget.
std::optional<TrainingView> build_clozemath_infill(const ProblemRecord& record,
                                                   const std::vector<EquationSpan>& spans, const Vocab& vocab,
                                                   const ViewConfig& config, Rng& rng,
                                                   AttnMode attn = AttnMode::prefix);

TrainingView build_lm_view(const ProblemRecord& record, const Vocab& vocab, AttnMode attn);

// Causal LM view with each solution input token independently replaced by
// <M> with probability p; labels keep the original tokens.
TrainingView build_mft_view(const ProblemRecord& record, const Vocab& vocab, double p, Rng& rng);

// Same serialization as the equation-infilling view but over uniformly
// placed non-overlapping token spans, accumulated until the masked fraction
// reaches the class rate or nothing more fits.
TrainingView build_random_span_infill(const ProblemRecord& record, const Vocab& vocab,
                                      const ViewConfig& config, Rng& rng, SpanLengthClass length_class,
                                      AttnMode attn = AttnMode::prefix);

// ---------------------------------------------------------------------------
// training regimes (ablation grid rows plus the MFT baseline)
// ---------------------------------------------------------------------------

enum class Regime {
    clozemath,    // lm-prefix + equation-infill-prefix
    no_infill,    // lm-prefix
    no_prefix,    // lm-causal + equation-infill-causal
    it,           // lm-causal
    random_span,  // lm-prefix + random-span-infill-prefix
    mft,          // mft baseline (causal)
};

std::string to_string(Regime r);
Regime regime_from_string(const std::string& s);
bool regime_uses_prefix(Regime r);

struct ViewBuildStats {
    size_t records = 0;
    size_t views = 0;
    size_t skipped_sentinel_budget = 0;
    size_t skipped_overlong = 0;  // views longer than max_seq
};

// Builds the view set for one regime. Per-record RNG streams are derived
// from (config.rng_seed, record id) so construction order cannot change the
// output. Views longer than max_seq tokens are skipped and counted, never
// truncated.
std::vector<TrainingView> build_views_for_regime(const std::vector<ProblemRecord>& records, Regime regime,
                                                 const Vocab& vocab, const ViewConfig& config,
                                                 CorpusStyle style, int max_seq, ViewBuildStats* stats);

// ---------------------------------------------------------------------------
// view dump files (line-delimited JSON)
// ---------------------------------------------------------------------------

void write_view_dump(const std::string& path, const std::vector<TrainingView>& views);
std::vector<TrainingView> read_view_dump(const std::string& path);

}  // namespace cloze
