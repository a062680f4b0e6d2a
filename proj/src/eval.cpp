#include "cloze/eval.hpp"

#include <algorithm>
#include <filesystem>
#include <sstream>

#include <json.hpp>

namespace cloze {

using nlohmann::json;
namespace fs = std::filesystem;

bool exact_match(const std::optional<std::string>& predicted, const std::string& gold) {
    if (!predicted) return false;
    const std::string p = normalize_answer(*predicted);
    const std::string g = normalize_answer(gold);
    Rational pr, gr;
    if (Rational::try_parse(p, pr) && Rational::try_parse(g, gr)) return pr == gr;
    return p == g;
}

EvalReport evaluate(const Model& model, const Vocab& vocab, const std::vector<ProblemRecord>& dataset,
                    const DecodeConfig& decode_cfg, bool prefix_prompt, long long checkpoint_step) {
    if (static_cast<int>(vocab.size()) != model.config().vocab_size) {
        throw DataError("evaluate: vocabulary size " + std::to_string(vocab.size()) +
                        " does not match model vocab_size " + std::to_string(model.config().vocab_size));
    }
    // every prompt must be encodable before any decoding starts
    for (const auto& rec : dataset) {
        try {
            static_cast<void>(vocab.encode(rec.question));
        } catch (const DataError& e) {
            throw DataError("evaluate: vocabulary mismatch for record '" + rec.id + "': " + e.what());
        }
    }

    EvalReport report;
    report.config_hash = config_hash(model.config());
    report.checkpoint_step = checkpoint_step;
    report.strategy = to_string(decode_cfg.strategy);
    for (const auto& rec : dataset) {
        std::vector<TokenId> prompt = vocab.encode(rec.question);
        prompt.insert(prompt.begin(), vocab.reserved().bos_id);
        EvalVerdict v;
        v.id = rec.id;
        v.gold = rec.answer;
        // clamp the generation budget to what max_seq leaves for this prompt;
        // a question too long to decode scores as unanswered
        DecodeConfig cfg = decode_cfg;
        cfg.max_new_tokens = std::min(cfg.max_new_tokens,
                                      model.config().max_seq - static_cast<int>(prompt.size()));
        if (cfg.max_new_tokens >= 1) {
            auto res = run_decoder(model, vocab, prompt, prefix_prompt ? static_cast<int>(prompt.size()) : 0,
                                   cfg);
            v.predicted = res.answer;
            v.correct = exact_match(res.answer, rec.answer);
        }
        report.correct += v.correct;
        report.per_example.push_back(std::move(v));
    }
    report.n = dataset.size();
    report.empty = (report.n == 0);
    report.accuracy = report.empty ? 0.0 : static_cast<double>(report.correct) / static_cast<double>(report.n);
    return report;
}

ClozeEvalReport evaluate_cloze(const Model& model, const Vocab& vocab,
                               const std::vector<ProblemRecord>& dataset, CorpusStyle style,
                               bool prefix_prompt, int max_new_tokens) {
    ClozeEvalReport rep;
    const auto& rsv = vocab.reserved();
    for (const auto& rec : dataset) {
        auto spans = detect_spans(rec.solution, style);
        if (spans.size() > rsv.sentinel_ids.size()) continue;
        ++rep.records;
        if (spans.empty()) continue;

        // infilling prompt: BOS q masked-solution SEP
        std::vector<TokenId> prompt;
        prompt.push_back(rsv.bos_id);
        auto q = vocab.encode(rec.question);
        prompt.insert(prompt.end(), q.begin(), q.end());
        size_t cursor = 0;
        std::vector<std::string> gold;
        for (size_t i = 0; i < spans.size(); ++i) {
            auto seg = vocab.encode(std::string_view(rec.solution).substr(cursor, spans[i].start - cursor));
            prompt.insert(prompt.end(), seg.begin(), seg.end());
            prompt.push_back(rsv.sentinel_ids[i]);
            gold.push_back(rec.solution.substr(spans[i].start, spans[i].end - spans[i].start));
            cursor = spans[i].end;
        }
        auto tail = vocab.encode(std::string_view(rec.solution).substr(cursor));
        prompt.insert(prompt.end(), tail.begin(), tail.end());
        prompt.push_back(rsv.sep_id);

        DecodeConfig cfg;
        cfg.max_new_tokens = max_new_tokens;
        auto res = greedy(model, vocab, prompt, prefix_prompt ? static_cast<int>(prompt.size()) : 0, cfg);

        // split generated tokens into sentinel-keyed groups
        std::vector<std::vector<TokenId>> groups;
        for (TokenId id : res.tokens) {
            auto it = std::find(rsv.sentinel_ids.begin(), rsv.sentinel_ids.end(), id);
            if (it != rsv.sentinel_ids.end()) {
                groups.emplace_back();
            } else if (!groups.empty()) {
                groups.back().push_back(id);
            }
        }
        for (size_t i = 0; i < spans.size(); ++i) {
            ++rep.spans_total;
            if (i < groups.size() && vocab.decode(groups[i]) == gold[i]) ++rep.spans_filled_exact;
        }
    }
    rep.span_accuracy = rep.spans_total == 0
                            ? 0.0
                            : static_cast<double>(rep.spans_filled_exact) / static_cast<double>(rep.spans_total);
    return rep;
}

// ---------------------------------------------------------------------------
// report and series files
// ---------------------------------------------------------------------------

void write_eval_report(const std::string& path, const EvalReport& report) {
    std::ostringstream out;
    for (const auto& v : report.per_example) {
        json j{{"type", "example"}, {"id", v.id}, {"gold", v.gold}, {"verdict", v.correct}};
        if (v.predicted) {
            j["predicted"] = *v.predicted;
        } else {
            j["predicted"] = nullptr;
        }
        out << j.dump() << "\n";
    }
    json s{{"type", "summary"},
           {"n", report.n},
           {"correct", report.correct},
           {"accuracy", report.accuracy},
           {"empty", report.empty},
           {"config_hash", report.config_hash},
           {"checkpoint_step", report.checkpoint_step},
           {"strategy", report.strategy},
           {"l_lm", report.l_lm},
           {"l_infill", report.l_infill}};
    out << s.dump() << "\n";
    write_file(path, out.str());
}

EvalReport read_eval_report(const std::string& path) {
    EvalReport report;
    bool have_summary = false;
    size_t lineno = 0;
    for (const auto& line : split_lines(read_file(path))) {
        ++lineno;
        if (trim(line).empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw DataError(path + ":" + std::to_string(lineno) + ": malformed report line: " + e.what());
        }
        const std::string type = j.value("type", "");
        if (type == "example") {
            EvalVerdict v;
            v.id = j.at("id").get<std::string>();
            v.gold = j.at("gold").get<std::string>();
            v.correct = j.at("verdict").get<bool>();
            if (j.contains("predicted") && !j["predicted"].is_null()) {
                v.predicted = j["predicted"].get<std::string>();
            }
            report.per_example.push_back(std::move(v));
        } else if (type == "summary") {
            report.n = j.at("n").get<size_t>();
            report.correct = j.at("correct").get<size_t>();
            report.accuracy = j.at("accuracy").get<double>();
            report.empty = j.value("empty", false);
            report.config_hash = j.value("config_hash", "");
            report.checkpoint_step = j.value("checkpoint_step", 0LL);
            report.strategy = j.value("strategy", "");
            report.l_lm = j.value("l_lm", 0.0);
            report.l_infill = j.value("l_infill", 0.0);
            have_summary = true;
        } else {
            throw DataError(path + ":" + std::to_string(lineno) + ": unknown report record type");
        }
    }
    if (!have_summary) throw DataError(path + ": report has no summary record");
    // self-consistency: the summary must agree with the example records
    size_t recount = 0;
    for (const auto& v : report.per_example) recount += v.correct;
    if (recount != report.correct || report.per_example.size() != report.n) {
        throw DataError(path + ": summary does not match the per-example records");
    }
    return report;
}

MetricSeries checkpoint_curve(const std::string& run_dir) {
    MetricSeries series;
    if (!fs::is_directory(run_dir)) throw DataError("checkpoint_curve: not a directory: " + run_dir);
    for (const auto& entry : fs::directory_iterator(run_dir)) {
        const std::string name = entry.path().filename().string();
        if (name.rfind("eval_step", 0) != 0 || entry.path().extension() != ".jsonl") continue;
        EvalReport rep = read_eval_report(entry.path().string());
        series.push_back({rep.checkpoint_step, rep.accuracy, rep.l_lm, rep.l_infill});
    }
    if (series.empty()) throw DataError("checkpoint_curve: no eval reports under " + run_dir);
    std::sort(series.begin(), series.end(),
              [](const MetricPoint& a, const MetricPoint& b) { return a.step < b.step; });
    for (size_t i = 1; i < series.size(); ++i) {
        if (series[i].step == series[i - 1].step) {
            throw DataError("checkpoint_curve: duplicate step " + std::to_string(series[i].step));
        }
    }
    return series;
}

void write_metric_series(const std::string& path, const MetricSeries& series) {
    std::ostringstream out;
    out << "step\taccuracy\tl_lm\tl_infill\n";
    char buf[128];
    for (const auto& p : series) {
        std::snprintf(buf, sizeof buf, "%lld\t%.6f\t%.6f\t%.6f\n", p.step, p.accuracy, p.l_lm, p.l_infill);
        out << buf;
    }
    write_file(path, out.str());
}

MetricSeries read_metric_series(const std::string& path) {
    MetricSeries series;
    size_t lineno = 0;
    for (const auto& line : split_lines(read_file(path))) {
        ++lineno;
        if (lineno == 1 || trim(line).empty()) continue;  // header
        MetricPoint p;
        if (std::sscanf(line.c_str(), "%lld\t%lf\t%lf\t%lf", &p.step, &p.accuracy, &p.l_lm, &p.l_infill) != 4) {
            throw DataError(path + ":" + std::to_string(lineno) + ": malformed metric row");
        }
        series.push_back(p);
    }
    for (size_t i = 1; i < series.size(); ++i) {
        if (series[i].step <= series[i - 1].step) {
            throw DataError(path + ": steps must be strictly increasing");
        }
    }
    return series;
}

}  // namespace cloze
