#include "cloze/decode.hpp"

#include <algorithm>
#include <cmath>

#include "cloze/corpus.hpp"

namespace cloze {

std::string to_string(DecodeConfig::Strategy s) {
    switch (s) {
        case DecodeConfig::Strategy::greedy: return "greedy";
        case DecodeConfig::Strategy::beam: return "beam";
        case DecodeConfig::Strategy::cot: return "cot";
    }
    return "?";
}

DecodeConfig::Strategy strategy_from_string(const std::string& s) {
    if (s == "greedy") return DecodeConfig::Strategy::greedy;
    if (s == "beam") return DecodeConfig::Strategy::beam;
    if (s == "cot") return DecodeConfig::Strategy::cot;
    throw UsageError("unknown decode strategy: " + s + " (expected greedy|beam|cot)");
}

void validate(const DecodeConfig& cfg) {
    if (cfg.num_beams < 1) throw DataError("decode config: num_beams must be >= 1");
    if (cfg.k_branches < 1) throw DataError("decode config: k_branches must be >= 1");
    if (cfg.max_new_tokens < 1) throw DataError("decode config: max_new_tokens must be >= 1");
    if (cfg.length_penalty < 0.0) throw DataError("decode config: length_penalty must be >= 0");
}

namespace {

void check_budget(const Model& model, const std::vector<TokenId>& prompt, const DecodeConfig& cfg) {
    validate(cfg);
    if (prompt.empty()) throw DataError("decode: empty prompt");
    if (static_cast<int>(prompt.size()) + cfg.max_new_tokens > model.config().max_seq) {
        throw DataError("decode: prompt of " + std::to_string(prompt.size()) +
                        " tokens does not fit max_seq - max_new_tokens (" +
                        std::to_string(model.config().max_seq) + " - " +
                        std::to_string(cfg.max_new_tokens) + ")");
    }
}

std::vector<double> softmax_probs(const std::vector<float>& logits) {
    float maxv = logits[0];
    for (float v : logits) maxv = std::max(maxv, v);
    std::vector<double> p(logits.size());
    double denom = 0.0;
    for (size_t i = 0; i < logits.size(); ++i) {
        p[i] = std::exp(static_cast<double>(logits[i] - maxv));
        denom += p[i];
    }
    for (double& v : p) v /= denom;
    return p;
}

TokenId argmax_token(const std::vector<float>& logits) {
    TokenId best = 0;
    for (size_t c = 1; c < logits.size(); ++c) {
        if (logits[c] > logits[static_cast<size_t>(best)]) best = static_cast<TokenId>(c);
    }
    return best;  // strict > keeps ties at the lower id
}

// top1-top2 probability margin
double margin_of(const std::vector<double>& probs) {
    double top1 = -1.0, top2 = -1.0;
    for (double p : probs) {
        if (p > top1) {
            top2 = top1;
            top1 = p;
        } else if (p > top2) {
            top2 = p;
        }
    }
    return top1 - (top2 < 0.0 ? 0.0 : top2);
}

std::optional<std::string> extract_normalized_answer(const std::string& completion) {
    auto raw = extract_final_answer(completion, CorpusStyle::gsm8k_annotated);
    if (!raw) return std::nullopt;
    return normalize_answer(*raw);
}

struct GreedyRun {
    std::vector<TokenId> tokens;  // completion, EOS excluded
    std::vector<double> margins;  // per generated token (incl. the EOS step if taken)
    double logprob = 0.0;
};

// Greedy continuation from a primed session; first_forced >= 0 forces the
// initial token (CoT branching).
GreedyRun greedy_continue(InferenceSession& session, std::vector<float> logits, const Vocab& vocab,
                          int budget, TokenId first_forced) {
    GreedyRun run;
    const TokenId eos = vocab.reserved().eos_id;
    for (int step = 0; step < budget; ++step) {
        auto probs = softmax_probs(logits);
        TokenId tok = (step == 0 && first_forced >= 0) ? first_forced : argmax_token(logits);
        run.margins.push_back(margin_of(probs));
        run.logprob += std::log(std::max(probs[static_cast<size_t>(tok)], 1e-300));
        if (tok == eos) break;
        run.tokens.push_back(tok);
        if (step + 1 < budget) logits = session.step(tok);
    }
    return run;
}

}  // namespace

std::vector<size_t> answer_token_positions(const Vocab& vocab, const std::vector<TokenId>& completion) {
    auto decoded = vocab.decode_with_offsets(completion);
    const std::string& text = decoded.text;
    size_t marker = text.rfind("####");
    if (marker == std::string::npos) return {};
    size_t rs = marker + 4;
    while (rs < text.size() && (text[rs] == ' ' || text[rs] == '\t')) ++rs;
    size_t re = rs;
    auto is_answer_char = [](char c) {
        return (c >= '0' && c <= '9') || c == '%' || c == '.' || c == ',';
    };
    while (re < text.size() && is_answer_char(text[re])) ++re;
    if (re == rs) return {};
    std::vector<size_t> positions;
    for (size_t i = 0; i < completion.size(); ++i) {
        auto [s, e] = decoded.offsets[i];
        if (s >= rs && e <= re && s < e) positions.push_back(i);
    }
    return positions;
}

DecodeResult greedy(const Model& model, const Vocab& vocab, const std::vector<TokenId>& prompt_ids,
                    int prompt_prefix_len, const DecodeConfig& cfg) {
    check_budget(model, prompt_ids, cfg);
    InferenceSession session(model, static_cast<int>(prompt_ids.size()) + cfg.max_new_tokens);
    auto logits = session.prefill(prompt_ids, prompt_prefix_len);
    GreedyRun run = greedy_continue(session, std::move(logits), vocab, cfg.max_new_tokens, -1);
    DecodeResult res;
    res.tokens = std::move(run.tokens);
    res.logprob = run.logprob;
    res.text = vocab.decode(res.tokens);
    res.answer = extract_normalized_answer(res.text);
    return res;
}

// ---------------------------------------------------------------------------
// beam search
// ---------------------------------------------------------------------------

namespace {

struct Hypothesis {
    std::vector<TokenId> tokens;  // generated tokens, EOS excluded
    double logprob = 0.0;
    int session = -1;  // index into the session pool
    std::vector<float> logits;
};

struct Finished {
    std::vector<TokenId> tokens;
    double logprob = 0.0;   // includes the EOS step
    double score = 0.0;     // length-normalized
    int gen_len = 0;        // generated tokens including EOS
};

bool seq_less(const std::vector<TokenId>& a, const std::vector<TokenId>& b) {
    return std::lexicographical_compare(a.begin(), a.end(), b.begin(), b.end());
}

}  // namespace

DecodeResult beam(const Model& model, const Vocab& vocab, const std::vector<TokenId>& prompt_ids,
                  int prompt_prefix_len, const DecodeConfig& cfg) {
    check_budget(model, prompt_ids, cfg);
    const TokenId eos = vocab.reserved().eos_id;
    const int capacity = static_cast<int>(prompt_ids.size()) + cfg.max_new_tokens;

    std::vector<InferenceSession> pool;
    pool.reserve(static_cast<size_t>(cfg.num_beams) * 2);
    pool.emplace_back(model, capacity);
    auto logits0 = pool[0].prefill(prompt_ids, prompt_prefix_len);

    std::vector<Hypothesis> alive(1);
    alive[0].session = 0;
    alive[0].logits = std::move(logits0);

    std::vector<Finished> finished;

    for (int step = 0; step < cfg.max_new_tokens && !alive.empty(); ++step) {
        struct Candidate {
            int parent;
            TokenId token;
            double logprob;
        };
        std::vector<Candidate> cands;
        for (size_t h = 0; h < alive.size(); ++h) {
            auto probs = softmax_probs(alive[h].logits);
            for (size_t c = 0; c < probs.size(); ++c) {
                cands.push_back({static_cast<int>(h), static_cast<TokenId>(c),
                                 alive[h].logprob + std::log(std::max(probs[c], 1e-300))});
            }
        }
        std::sort(cands.begin(), cands.end(), [&](const Candidate& a, const Candidate& b) {
            if (a.logprob != b.logprob) return a.logprob > b.logprob;
            // tie: lexicographically lower full token sequence
            const auto& ta = alive[static_cast<size_t>(a.parent)].tokens;
            const auto& tb = alive[static_cast<size_t>(b.parent)].tokens;
            if (ta != tb) return seq_less(ta, tb);
            return a.token < b.token;
        });
        if (cands.size() > static_cast<size_t>(cfg.num_beams)) cands.resize(static_cast<size_t>(cfg.num_beams));

        // children per surviving parent; the first child inherits the
        // parent's session, later ones clone into recycled slots so the pool
        // stays bounded by ~2 x num_beams
        std::vector<int> child_count(alive.size(), 0);
        for (const Candidate& c : cands) {
            if (c.token != eos) ++child_count[static_cast<size_t>(c.parent)];
        }
        std::vector<int> free_slots;
        for (size_t h = 0; h < alive.size(); ++h) {
            if (child_count[h] == 0) free_slots.push_back(alive[h].session);
        }
        std::vector<int> parent_used(alive.size(), 0);
        std::vector<Hypothesis> next;
        std::vector<TokenId> next_token;
        const bool last_step = (step + 1 == cfg.max_new_tokens);
        // pass 1: record finished hypotheses and assign sessions; clones must
        // be taken before any in-place child steps its parent's session
        for (const Candidate& c : cands) {
            Hypothesis& par = alive[static_cast<size_t>(c.parent)];
            if (c.token == eos) {
                Finished f;
                f.tokens = par.tokens;
                f.logprob = c.logprob;
                f.gen_len = static_cast<int>(par.tokens.size()) + 1;
                f.score = c.logprob / std::pow(static_cast<double>(f.gen_len), cfg.length_penalty);
                finished.push_back(std::move(f));
                continue;
            }
            Hypothesis child;
            child.tokens = par.tokens;
            child.tokens.push_back(c.token);
            child.logprob = c.logprob;
            if (!last_step) {  // sessions are only needed while expansion continues
                if (parent_used[static_cast<size_t>(c.parent)] == 0) {
                    child.session = par.session;
                } else if (!free_slots.empty()) {
                    child.session = free_slots.back();
                    free_slots.pop_back();
                    pool[static_cast<size_t>(child.session)] = pool[static_cast<size_t>(par.session)];
                } else {
                    pool.push_back(pool[static_cast<size_t>(par.session)]);
                    child.session = static_cast<int>(pool.size()) - 1;
                }
                ++parent_used[static_cast<size_t>(c.parent)];
            }
            next.push_back(std::move(child));
            next_token.push_back(c.token);
        }
        // pass 2: advance every surviving child by its own token
        if (!last_step) {
            for (size_t h = 0; h < next.size(); ++h) {
                next[h].logits = pool[static_cast<size_t>(next[h].session)].step(next_token[h]);
            }
        }
        alive = std::move(next);

        // stop once no alive hypothesis can beat the best finished score:
        // logprob only decreases with length, so logprob/max_len^p bounds
        // every continuation of a negative-logprob hypothesis
        if (!finished.empty() && !alive.empty()) {
            double best_finished = finished[0].score;
            for (const auto& f : finished) best_finished = std::max(best_finished, f.score);
            double best_alive = alive[0].logprob;
            for (const auto& h : alive) best_alive = std::max(best_alive, h.logprob);
            const double bound =
                best_alive <= 0.0
                    ? best_alive / std::pow(static_cast<double>(cfg.max_new_tokens), cfg.length_penalty)
                    : best_alive;
            if (bound <= best_finished) break;
        }
    }

    // hypotheses still alive at the budget stop the way greedy stops: they
    // join the pool with the same length normalization
    for (const auto& h : alive) {
        Finished f;
        f.tokens = h.tokens;
        f.logprob = h.logprob;
        f.gen_len = static_cast<int>(h.tokens.size());
        f.score = h.logprob / std::pow(static_cast<double>(std::max(1, f.gen_len)), cfg.length_penalty);
        finished.push_back(std::move(f));
    }
    if (finished.empty()) throw DataError("beam: no hypotheses survive");
    const Finished* best = &finished[0];
    for (const auto& f : finished) {
        if (f.score > best->score || (f.score == best->score && seq_less(f.tokens, best->tokens))) {
            best = &f;
        }
    }
    DecodeResult res;
    res.tokens = best->tokens;
    res.logprob = best->logprob;
    res.text = vocab.decode(res.tokens);
    res.answer = extract_normalized_answer(res.text);
    return res;
}

// ---------------------------------------------------------------------------
// CoT-confidence decoding
// ---------------------------------------------------------------------------

CotChoice aggregate_cot_branches(const std::vector<CotBranch>& branches) {
    CotChoice choice;
    for (const auto& b : branches) {
        if (!b.scored || !b.answer) continue;
        choice.scores[*b.answer] += b.confidence;
    }
    if (choice.scores.empty()) return choice;
    std::string best;
    double best_score = -1.0;
    for (const auto& [ans, score] : choice.scores) {
        if (score > best_score) {
            best_score = score;
            best = ans;
        } else if (score == best_score) {
            // tie: the answer with the highest single-branch confidence, then
            // the lower branch index
            double top_cur = -1.0, top_best = -1.0;
            int idx_cur = -1, idx_best = -1;
            for (size_t i = 0; i < branches.size(); ++i) {
                const auto& b = branches[i];
                if (!b.scored || !b.answer) continue;
                if (*b.answer == ans && (b.confidence > top_cur)) {
                    top_cur = b.confidence;
                    idx_cur = static_cast<int>(i);
                }
                if (*b.answer == best && (b.confidence > top_best)) {
                    top_best = b.confidence;
                    idx_best = static_cast<int>(i);
                }
            }
            if (top_cur > top_best || (top_cur == top_best && idx_cur < idx_best)) best = ans;
        }
    }
    choice.answer = best;
    for (size_t i = 0; i < branches.size(); ++i) {
        const auto& b = branches[i];
        if (b.scored && b.answer && *b.answer == best) {
            if (choice.winner_branch < 0 ||
                b.confidence > branches[static_cast<size_t>(choice.winner_branch)].confidence) {
                choice.winner_branch = static_cast<int>(i);
            }
        }
    }
    return choice;
}

DecodeResult cot_decode(const Model& model, const Vocab& vocab, const std::vector<TokenId>& prompt_ids,
                        int prompt_prefix_len, const DecodeConfig& cfg) {
    check_budget(model, prompt_ids, cfg);
    const int capacity = static_cast<int>(prompt_ids.size()) + cfg.max_new_tokens;

    InferenceSession primed(model, capacity);
    auto first_logits = primed.prefill(prompt_ids, prompt_prefix_len);
    auto first_probs = softmax_probs(first_logits);

    // top-k first tokens, ties toward the lower id
    std::vector<TokenId> order(first_probs.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<TokenId>(i);
    std::stable_sort(order.begin(), order.end(), [&](TokenId a, TokenId b) {
        return first_probs[static_cast<size_t>(a)] > first_probs[static_cast<size_t>(b)];
    });
    const int k = std::min<int>(cfg.k_branches, static_cast<int>(order.size()));

    DecodeResult res;
    std::vector<std::vector<TokenId>> branch_tokens;
    std::vector<double> branch_logprobs;
    for (int b = 0; b < k; ++b) {
        InferenceSession session = primed;  // prompt-only state
        GreedyRun run = greedy_continue(session, first_logits, vocab, cfg.max_new_tokens, order[static_cast<size_t>(b)]);
        CotBranch branch;
        branch.first_token = order[static_cast<size_t>(b)];
        branch.text = vocab.decode(run.tokens);
        branch.answer = extract_normalized_answer(branch.text);
        auto pos = answer_token_positions(vocab, run.tokens);
        if (branch.answer && !pos.empty()) {
            double sum = 0.0;
            for (size_t p : pos) sum += run.margins[p];
            branch.confidence = sum / static_cast<double>(pos.size());
            branch.scored = true;
        }
        res.branches.push_back(std::move(branch));
        branch_tokens.push_back(std::move(run.tokens));
        branch_logprobs.push_back(run.logprob);
    }

    CotChoice choice = aggregate_cot_branches(res.branches);
    res.aggregate_scores = choice.scores;
    res.answer = choice.answer;
    const int shown = choice.winner_branch >= 0 ? choice.winner_branch : 0;
    res.text = res.branches[static_cast<size_t>(shown)].text;
    res.tokens = branch_tokens[static_cast<size_t>(shown)];
    res.logprob = branch_logprobs[static_cast<size_t>(shown)];
    return res;
}

DecodeResult run_decoder(const Model& model, const Vocab& vocab, const std::vector<TokenId>& prompt_ids,
                         int prompt_prefix_len, const DecodeConfig& cfg) {
    switch (cfg.strategy) {
        case DecodeConfig::Strategy::greedy: return greedy(model, vocab, prompt_ids, prompt_prefix_len, cfg);
        case DecodeConfig::Strategy::beam: return beam(model, vocab, prompt_ids, prompt_prefix_len, cfg);
        case DecodeConfig::Strategy::cot: return cot_decode(model, vocab, prompt_ids, prompt_prefix_len, cfg);
    }
    throw UsageError("unknown decode strategy");
}

}  // namespace cloze
