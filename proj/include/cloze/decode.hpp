#pragma once

// Greedy, beam-search, and CoT-confidence decoding over a trained model.
// All decoders are deterministic: ties break toward the lower token id
// (beam: lexicographically lower token sequence).

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cloze/model.hpp"
#include "cloze/tokenizer.hpp"

namespace cloze {

struct DecodeConfig {
    enum class Strategy { greedy, beam, cot } strategy = Strategy::greedy;
    int num_beams = 5;    // beam search width
    int k_branches = 9;   // CoT branch count
    int max_new_tokens = 256;
    double length_penalty = 1.0;  // finished beams score as logprob / len^penalty
};

std::string to_string(DecodeConfig::Strategy s);
DecodeConfig::Strategy strategy_from_string(const std::string& s);
void validate(const DecodeConfig& cfg);

struct CotBranch {
    TokenId first_token = -1;
    std::string text;
    std::optional<std::string> answer;  // normalized
    double confidence = 0.0;            // mean top1-top2 margin over answer tokens
    bool scored = false;                // false: no anchored answer, excluded from aggregation
};

struct DecodeResult {
    std::string text;                   // decoded completion (EOS excluded)
    std::optional<std::string> answer;  // normalized final answer, when extractable
    std::vector<TokenId> tokens;
    double logprob = 0.0;
    std::vector<CotBranch> branches;                 // cot only
    std::map<std::string, double> aggregate_scores;  // cot only: answer -> summed confidence
};

// prompt_prefix_len: 0 for causal prompts, prompt length for PrefixLM-trained
// models. Throws DataError when the prompt does not fit
// max_seq - max_new_tokens.
DecodeResult greedy(const Model& model, const Vocab& vocab, const std::vector<TokenId>& prompt_ids,
                    int prompt_prefix_len, const DecodeConfig& cfg);

DecodeResult beam(const Model& model, const Vocab& vocab, const std::vector<TokenId>& prompt_ids,
                  int prompt_prefix_len, const DecodeConfig& cfg);

DecodeResult cot_decode(const Model& model, const Vocab& vocab, const std::vector<TokenId>& prompt_ids,
                        int prompt_prefix_len, const DecodeConfig& cfg);

DecodeResult run_decoder(const Model& model, const Vocab& vocab, const std::vector<TokenId>& prompt_ids,
                         int prompt_prefix_len, const DecodeConfig& cfg);

// Aggregation rule, separated so fixtures can drive it directly: sums the
// confidence of scored branches per distinct answer; the winner is the
// argmax, ties broken by the higher single-branch confidence and then the
// lower branch index.
struct CotChoice {
    std::optional<std::string> answer;
    std::map<std::string, double> scores;
    int winner_branch = -1;
};
CotChoice aggregate_cot_branches(const std::vector<CotBranch>& branches);

// Locates the answer-token run in a decoded completion: the maximal run of
// digit/percent/period/comma tokens after the last "####" (leading spaces
// skipped). Returns token indices into the completion.
std::vector<size_t> answer_token_positions(const Vocab& vocab, const std::vector<TokenId>& completion);

}  // namespace cloze
