#include "cloze/views.hpp"
#include <cmath>

#include <algorithm>
#include <sstream>

#include <json.hpp>

namespace cloze {

using nlohmann::json;

std::string to_string(ViewKind k) {
    switch (k) {
        case ViewKind::clozemath_infill: return "clozemath_infill";
        case ViewKind::lm: return "lm";
        case ViewKind::mft: return "mft";
        case ViewKind::random_span_infill: return "random_span_infill";
    }
    return "?";
}

ViewKind view_kind_from_string(const std::string& s) {
    if (s == "clozemath_infill") return ViewKind::clozemath_infill;
    if (s == "lm") return ViewKind::lm;
    if (s == "mft") return ViewKind::mft;
    if (s == "random_span_infill") return ViewKind::random_span_infill;
    throw DataError("unknown view kind: " + s);
}

std::string to_string(AttnMode m) { return m == AttnMode::prefix ? "prefix" : "causal"; }

AttnMode attn_mode_from_string(const std::string& s) {
    if (s == "prefix") return AttnMode::prefix;
    if (s == "causal") return AttnMode::causal;
    throw UsageError("unknown attention mode: " + s);
}

bool is_infill_kind(ViewKind k) {
    return k == ViewKind::clozemath_infill || k == ViewKind::random_span_infill;
}

std::vector<std::vector<bool>> build_attention_mask(const AttentionSpec& spec) {
    if (spec.seq_len < 0 || spec.prefix_len < 0 || spec.prefix_len > spec.seq_len) {
        throw DataError("attention spec: need 0 <= prefix_len <= seq_len");
    }
    std::vector<std::vector<bool>> allowed(static_cast<size_t>(spec.seq_len),
                                           std::vector<bool>(static_cast<size_t>(spec.seq_len), false));
    for (int i = 0; i < spec.seq_len; ++i) {
        for (int j = 0; j < spec.seq_len; ++j) {
            allowed[static_cast<size_t>(i)][static_cast<size_t>(j)] = (j <= i) || (j < spec.prefix_len);
        }
    }
    return allowed;
}

// ---------------------------------------------------------------------------
// view builders
// ---------------------------------------------------------------------------

namespace {

void append(std::vector<TokenId>& dst, const std::vector<TokenId>& src) {
    dst.insert(dst.end(), src.begin(), src.end());
}

// Shared tail for both infilling serializations: assembles
// BOS q <masked> SEP [sent_i target_i]... EOS and the label layout.
TrainingView assemble_infill(const ProblemRecord& record, const Vocab& vocab, ViewKind kind,
                             const std::vector<TokenId>& masked_solution,
                             const std::vector<std::vector<TokenId>>& targets, AttnMode attn) {
    const auto& rsv = vocab.reserved();
    TrainingView v;
    v.kind = kind;
    v.source_id = record.id;
    v.span_count = static_cast<int>(targets.size());

    v.input_ids.push_back(rsv.bos_id);
    append(v.input_ids, vocab.encode(record.question));
    append(v.input_ids, masked_solution);
    v.input_ids.push_back(rsv.sep_id);
    const int after_sep = static_cast<int>(v.input_ids.size());
    for (size_t i = 0; i < targets.size(); ++i) {
        v.input_ids.push_back(rsv.sentinel_ids[i]);
        append(v.input_ids, targets[i]);
        v.masked_tokens += static_cast<int>(targets[i].size());
    }
    v.input_ids.push_back(rsv.eos_id);

    v.prefix_len = (attn == AttnMode::prefix) ? after_sep : 0;
    v.labels.assign(v.input_ids.size(), kIgnoreLabel);
    for (size_t i = static_cast<size_t>(after_sep); i < v.input_ids.size(); ++i) {
        v.labels[i] = v.input_ids[i];
    }
    return v;
}

}  // namespace

std::optional<TrainingView> build_clozemath_infill(const ProblemRecord& record,
                                                   const std::vector<EquationSpan>& spans, const Vocab& vocab,
                                                   const ViewConfig& config, Rng& rng, AttnMode attn) {
    std::vector<EquationSpan> used;
    used.reserve(spans.size());
    for (const auto& sp : spans) {
        if (config.mask_all_equations || rng.bernoulli(config.equation_mask_prob)) used.push_back(sp);
    }
    if (used.size() > static_cast<size_t>(config.sentinel_budget) ||
        used.size() > vocab.reserved().sentinel_ids.size()) {
        return std::nullopt;  // caller counts the skip
    }

    std::vector<TokenId> masked;
    std::vector<std::vector<TokenId>> targets;
    size_t cursor = 0;
    for (size_t i = 0; i < used.size(); ++i) {
        const auto& sp = used[i];
        append(masked, vocab.encode(std::string_view(record.solution).substr(cursor, sp.start - cursor)));
        masked.push_back(vocab.reserved().sentinel_ids[i]);
        targets.push_back(vocab.encode(std::string_view(record.solution).substr(sp.start, sp.end - sp.start)));
        cursor = sp.end;
    }
    append(masked, vocab.encode(std::string_view(record.solution).substr(cursor)));

    return assemble_infill(record, vocab, ViewKind::clozemath_infill, masked, targets, attn);
}

TrainingView build_lm_view(const ProblemRecord& record, const Vocab& vocab, AttnMode attn) {
    const auto& rsv = vocab.reserved();
    TrainingView v;
    v.kind = ViewKind::lm;
    v.source_id = record.id;
    v.input_ids.push_back(rsv.bos_id);
    append(v.input_ids, vocab.encode(record.question));
    const size_t solution_start = v.input_ids.size();
    append(v.input_ids, vocab.encode(record.solution));
    v.input_ids.push_back(rsv.eos_id);

    v.prefix_len = (attn == AttnMode::prefix) ? static_cast<int>(solution_start) : 0;
    v.labels.assign(v.input_ids.size(), kIgnoreLabel);
    for (size_t i = solution_start; i < v.input_ids.size(); ++i) v.labels[i] = v.input_ids[i];
    return v;
}

TrainingView build_mft_view(const ProblemRecord& record, const Vocab& vocab, double p, Rng& rng) {
    if (p < 0.0 || p > 1.0) throw DataError("mft: p must be in [0,1]");
    TrainingView v = build_lm_view(record, vocab, AttnMode::causal);
    v.kind = ViewKind::mft;
    const TokenId eos = vocab.reserved().eos_id;
    for (size_t i = 0; i < v.input_ids.size(); ++i) {
        // solution tokens are exactly the labeled positions short of EOS
        if (v.labels[i] == kIgnoreLabel || v.input_ids[i] == eos) continue;
        if (rng.bernoulli(p)) {
            v.input_ids[i] = vocab.reserved().mft_mask_id;
            ++v.masked_tokens;
        }
    }
    return v;
}

TrainingView build_random_span_infill(const ProblemRecord& record, const Vocab& vocab,
                                      const ViewConfig& config, Rng& rng, SpanLengthClass length_class,
                                      AttnMode attn) {
    const double rate =
        length_class == SpanLengthClass::short_spans ? config.short_span_rate : config.long_span_rate;
    const int span_len =
        length_class == SpanLengthClass::short_spans ? config.span_len_short : config.span_len_long;
    if (span_len < 1) throw DataError("random span: span length must be >= 1");

    const std::vector<TokenId> solution_ids = vocab.encode(record.solution);
    const int n = static_cast<int>(solution_ids.size());
    const int target = static_cast<int>(std::ceil(rate * n));

    std::vector<std::pair<int, int>> placed;  // (start, len), token space
    std::vector<bool> occupied(static_cast<size_t>(n), false);
    int masked = 0;
    while (masked < target) {
        // the last span is truncated so the masked count lands exactly on
        // the class rate
        const int len = std::min(span_len, target - masked);
        std::vector<int> starts;
        for (int s = 0; s + len <= n; ++s) {
            bool free = true;
            for (int k = s; k < s + len; ++k) {
                if (occupied[static_cast<size_t>(k)]) {
                    free = false;
                    break;
                }
            }
            if (free) starts.push_back(s);
        }
        if (starts.empty()) break;  // no placement remains
        int s = starts[rng.below(starts.size())];
        placed.emplace_back(s, len);
        for (int k = s; k < s + len; ++k) occupied[static_cast<size_t>(k)] = true;
        masked += len;
    }
    std::sort(placed.begin(), placed.end());
    if (placed.size() > vocab.reserved().sentinel_ids.size()) {
        placed.resize(vocab.reserved().sentinel_ids.size());  // sentinel budget hard cap
    }

    std::vector<TokenId> masked_ids;
    std::vector<std::vector<TokenId>> targets;
    int cursor = 0;
    for (size_t i = 0; i < placed.size(); ++i) {
        auto [s, len] = placed[i];
        masked_ids.insert(masked_ids.end(), solution_ids.begin() + cursor, solution_ids.begin() + s);
        masked_ids.push_back(vocab.reserved().sentinel_ids[i]);
        targets.emplace_back(solution_ids.begin() + s, solution_ids.begin() + s + len);
        cursor = s + len;
    }
    masked_ids.insert(masked_ids.end(), solution_ids.begin() + cursor, solution_ids.end());

    return assemble_infill(record, vocab, ViewKind::random_span_infill, masked_ids, targets, attn);
}

// ---------------------------------------------------------------------------
// regimes
// ---------------------------------------------------------------------------

std::string to_string(Regime r) {
    switch (r) {
        case Regime::clozemath: return "clozemath";
        case Regime::no_infill: return "no_infill";
        case Regime::no_prefix: return "no_prefix";
        case Regime::it: return "it";
        case Regime::random_span: return "random_span";
        case Regime::mft: return "mft";
    }
    return "?";
}

Regime regime_from_string(const std::string& s) {
    if (s == "clozemath") return Regime::clozemath;
    if (s == "no_infill") return Regime::no_infill;
    if (s == "no_prefix") return Regime::no_prefix;
    if (s == "it") return Regime::it;
    if (s == "random_span") return Regime::random_span;
    if (s == "mft") return Regime::mft;
    throw UsageError("unknown regime: " + s +
                     " (expected clozemath|no_infill|no_prefix|it|random_span|mft)");
}

bool regime_uses_prefix(Regime r) {
    return r == Regime::clozemath || r == Regime::no_infill || r == Regime::random_span;
}

std::vector<TrainingView> build_views_for_regime(const std::vector<ProblemRecord>& records, Regime regime,
                                                 const Vocab& vocab, const ViewConfig& config,
                                                 CorpusStyle style, int max_seq, ViewBuildStats* stats) {
    ViewBuildStats local;
    std::vector<TrainingView> views;
    const AttnMode mode = regime_uses_prefix(regime) ? AttnMode::prefix : AttnMode::causal;
    for (const auto& rec : records) {
        ++local.records;
        Rng rng = Rng::derive(config.rng_seed, rec.id);
        std::vector<TrainingView> per_record;

        if (regime == Regime::mft) {
            per_record.push_back(build_mft_view(rec, vocab, config.mft_p, rng));
        } else {
            per_record.push_back(build_lm_view(rec, vocab, mode));
            if (regime == Regime::clozemath || regime == Regime::no_prefix) {
                auto spans = detect_spans(rec.solution, style);
                auto infill = build_clozemath_infill(rec, spans, vocab, config, rng, mode);
                if (infill) {
                    per_record.push_back(std::move(*infill));
                } else {
                    ++local.skipped_sentinel_budget;
                }
            } else if (regime == Regime::random_span) {
                SpanLengthClass cls =
                    rng.bernoulli(0.5) ? SpanLengthClass::short_spans : SpanLengthClass::long_spans;
                per_record.push_back(build_random_span_infill(rec, vocab, config, rng, cls, mode));
            }
        }

        for (auto& v : per_record) {
            if (max_seq > 0 && v.input_ids.size() > static_cast<size_t>(max_seq)) {
                ++local.skipped_overlong;
                continue;
            }
            views.push_back(std::move(v));
            ++local.views;
        }
    }
    if (stats) *stats = local;
    return views;
}

// ---------------------------------------------------------------------------
// view dump IO
// ---------------------------------------------------------------------------

void write_view_dump(const std::string& path, const std::vector<TrainingView>& views) {
    std::ostringstream out;
    for (const auto& v : views) {
        json j;
        j["view_kind"] = to_string(v.kind);
        j["input_ids"] = v.input_ids;
        j["labels"] = v.labels;
        j["prefix_len"] = v.prefix_len;
        j["source_id"] = v.source_id;
        j["meta"] = {{"span_count", v.span_count}, {"masked_tokens", v.masked_tokens}};
        out << j.dump() << "\n";
    }
    write_file(path, out.str());
}

std::vector<TrainingView> read_view_dump(const std::string& path) {
    std::vector<TrainingView> views;
    size_t lineno = 0;
    for (const auto& line : split_lines(read_file(path))) {
        ++lineno;
        if (trim(line).empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw DataError(path + ":" + std::to_string(lineno) + ": malformed view record: " + e.what());
        }
        TrainingView v;
        try {
            v.kind = view_kind_from_string(j.at("view_kind").get<std::string>());
            v.input_ids = j.at("input_ids").get<std::vector<TokenId>>();
            v.labels = j.at("labels").get<std::vector<TokenId>>();
            v.prefix_len = j.at("prefix_len").get<int>();
            v.source_id = j.at("source_id").get<std::string>();
            if (j.contains("meta")) {
                v.span_count = j["meta"].value("span_count", 0);
                v.masked_tokens = j["meta"].value("masked_tokens", 0);
            }
        } catch (const json::exception& e) {
            throw DataError(path + ":" + std::to_string(lineno) + ": malformed view record: " + e.what());
        }
        if (v.labels.size() != v.input_ids.size()) {
            throw DataError(path + ":" + std::to_string(lineno) + ": labels/input_ids length mismatch");
        }
        if (v.prefix_len < 0 || v.prefix_len > static_cast<int>(v.input_ids.size())) {
            throw DataError(path + ":" + std::to_string(lineno) + ": prefix_len out of range");
        }
        views.push_back(std::move(v));
    }
    return views;
}

}  // namespace cloze
