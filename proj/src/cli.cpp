#include "cloze/cli.hpp"

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "cloze/corpus.hpp"
#include "cloze/decode.hpp"
#include "cloze/eval.hpp"
#include "cloze/model.hpp"
#include "cloze/tokenizer.hpp"
#include "cloze/views.hpp"

namespace cloze {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// ---------------------------------------------------------------------------
// manifest and run-directory plumbing
// ---------------------------------------------------------------------------

std::string timestamp_utc() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

std::string hash_of_json(const json& j) {
    char buf[20];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(j.dump())));
    return buf;
}

class RunDir {
public:
    explicit RunDir(const std::string& path, const std::string& command, json resolved_config,
                    uint64_t seed)
        : path_(path), manifest_{{"command", command},
                                 {"config", std::move(resolved_config)},
                                 {"seed", seed},
                                 {"started_at", timestamp_utc()},
                                 {"versions", {{"clozemath", kVersion}}},
                                 {"artifacts", json::array()}} {
        manifest_["config_hash"] = hash_of_json(manifest_["config"]);
        fs::create_directories(path_);
        lock_ = (fs::path(path_) / ".lock").string();
        std::ofstream probe(lock_, std::ios::out | std::ios::app);
        if (fs::exists(lock_) && fs::file_size(lock_) > 0) {
            throw DataError(path + ": run directory is locked by another writer (remove " + lock_ +
                            " if that process is gone)");
        }
        std::ofstream out(lock_);
        out << ::getpid() << "\n";
        locked_ = true;
    }

    ~RunDir() {
        if (locked_) {
            std::error_code ec;
            fs::remove(lock_, ec);
        }
    }

    std::string file(const std::string& name) const { return (fs::path(path_) / name).string(); }

    void add_artifact(const std::string& name) { manifest_["artifacts"].push_back(name); }

    void finish() {
        manifest_["finished_at"] = timestamp_utc();
        write_file(file("manifest.json"), manifest_.dump(2) + "\n");
    }

    const std::string& path() const { return path_; }

private:
    std::string path_;
    json manifest_;
    std::string lock_;
    bool locked_ = false;
};

TemplateBank resolve_templates(const std::string& spec) {
    if (spec.empty() || spec == "builtin") return builtin_templates();
    return load_template_bank(spec);
}

json load_json_file(const std::string& path, const char* what) {
    try {
        return json::parse(read_file(path));
    } catch (const json::exception& e) {
        throw DataError(std::string(what) + " " + path + ": not valid JSON: " + e.what());
    }
}

// config files are flat key/value JSON; unknown keys are rejected with the
// offending path so typos fail loudly
template <typename Setter>
void apply_config_keys(const json& j, const std::string& where,
                       const std::map<std::string, Setter>& setters) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        auto s = setters.find(it.key());
        if (s == setters.end()) throw DataError(where + ": unknown key '" + it.key() + "'");
        try {
            s->second(it.value());
        } catch (const json::exception& e) {
            throw DataError(where + "." + it.key() + ": " + e.what());
        }
    }
}

ViewConfig view_config_from_file(const std::string& path) {
    ViewConfig c;
    if (path.empty()) return c;
    json j = load_json_file(path, "view config");
    using S = std::function<void(const json&)>;
    apply_config_keys<S>(j, path,
                         {{"mft_p", [&](const json& v) { c.mft_p = v.get<double>(); }},
                          {"short_span_rate", [&](const json& v) { c.short_span_rate = v.get<double>(); }},
                          {"long_span_rate", [&](const json& v) { c.long_span_rate = v.get<double>(); }},
                          {"span_len_short", [&](const json& v) { c.span_len_short = v.get<int>(); }},
                          {"span_len_long", [&](const json& v) { c.span_len_long = v.get<int>(); }},
                          {"sentinel_budget", [&](const json& v) { c.sentinel_budget = v.get<int>(); }},
                          {"lambda_infill", [&](const json& v) { c.lambda_infill = v.get<double>(); }},
                          {"mask_all_equations", [&](const json& v) { c.mask_all_equations = v.get<bool>(); }},
                          {"equation_mask_prob", [&](const json& v) { c.equation_mask_prob = v.get<double>(); }},
                          {"rng_seed", [&](const json& v) { c.rng_seed = v.get<uint64_t>(); }}});
    return c;
}

json view_config_to_json(const ViewConfig& c) {
    return json{{"mft_p", c.mft_p},
                {"short_span_rate", c.short_span_rate},
                {"long_span_rate", c.long_span_rate},
                {"span_len_short", c.span_len_short},
                {"span_len_long", c.span_len_long},
                {"sentinel_budget", c.sentinel_budget},
                {"lambda_infill", c.lambda_infill},
                {"mask_all_equations", c.mask_all_equations},
                {"equation_mask_prob", c.equation_mask_prob},
                {"rng_seed", c.rng_seed}};
}

ModelConfig model_config_from_file(const std::string& path) {
    ModelConfig c;
    if (path.empty()) return c;
    json j = load_json_file(path, "model config");
    using S = std::function<void(const json&)>;
    apply_config_keys<S>(
        j, path,
        {{"n_layers", [&](const json& v) { c.n_layers = v.get<int>(); }},
         {"n_heads", [&](const json& v) { c.n_heads = v.get<int>(); }},
         {"d_model", [&](const json& v) { c.d_model = v.get<int>(); }},
         {"d_ff", [&](const json& v) { c.d_ff = v.get<int>(); }},
         {"max_seq", [&](const json& v) { c.max_seq = v.get<int>(); }},
         {"lora_enabled", [&](const json& v) { c.lora_enabled = v.get<bool>(); }},
         {"lora_rank", [&](const json& v) { c.lora_rank = v.get<int>(); }},
         {"lora_alpha", [&](const json& v) { c.lora_alpha = v.get<double>(); }},
         {"lora_targets", [&](const json& v) { c.lora_targets = v.get<std::vector<std::string>>(); }},
         {"freeze_base", [&](const json& v) { c.freeze_base = v.get<bool>(); }},
         {"dropout", [&](const json& v) { c.dropout = v.get<double>(); }},
         {"seed", [&](const json& v) { c.seed = v.get<uint64_t>(); }}});
    return c;
}

json model_config_to_json_public(const ModelConfig& c) {
    return json{{"n_layers", c.n_layers},       {"n_heads", c.n_heads},
                {"d_model", c.d_model},         {"d_ff", c.d_ff},
                {"max_seq", c.max_seq},         {"vocab_size", c.vocab_size},
                {"lora_enabled", c.lora_enabled}, {"lora_rank", c.lora_rank},
                {"lora_alpha", c.lora_alpha},   {"lora_targets", c.lora_targets},
                {"freeze_base", c.freeze_base}, {"first_reserved_id", c.first_reserved_id},
                {"dropout", c.dropout},         {"seed", c.seed}};
}

TrainConfig train_config_from_file(const std::string& path) {
    TrainConfig c;
    if (path.empty()) return c;
    json j = load_json_file(path, "train config");
    using S = std::function<void(const json&)>;
    apply_config_keys<S>(
        j, path,
        {{"lr_peak", [&](const json& v) { c.lr_peak = v.get<double>(); }},
         {"schedule", [&](const json& v) { c.schedule = v.get<std::string>(); }},
         {"warmup_steps", [&](const json& v) { c.warmup_steps = v.get<int>(); }},
         {"total_steps", [&](const json& v) { c.total_steps = v.get<long long>(); }},
         {"batch_size", [&](const json& v) { c.batch_size = v.get<int>(); }},
         {"lambda_infill", [&](const json& v) { c.lambda_infill = v.get<double>(); }},
         {"grad_clip_norm", [&](const json& v) { c.grad_clip_norm = v.get<double>(); }},
         {"weight_decay", [&](const json& v) { c.weight_decay = v.get<double>(); }},
         {"beta1", [&](const json& v) { c.beta1 = v.get<double>(); }},
         {"beta2", [&](const json& v) { c.beta2 = v.get<double>(); }},
         {"adam_eps", [&](const json& v) { c.adam_eps = v.get<double>(); }},
         {"seed", [&](const json& v) { c.seed = v.get<uint64_t>(); }}});
    return c;
}

json train_config_to_json_public(const TrainConfig& c) {
    return json{{"lr_peak", c.lr_peak},
                {"schedule", c.schedule},
                {"warmup_steps", c.warmup_steps},
                {"total_steps", c.total_steps},
                {"batch_size", c.batch_size},
                {"lambda_infill", c.lambda_infill},
                {"grad_clip_norm", c.grad_clip_norm},
                {"weight_decay", c.weight_decay},
                {"beta1", c.beta1},
                {"beta2", c.beta2},
                {"adam_eps", c.adam_eps},
                {"seed", c.seed}};
}

// deterministic epoch-shuffled batch assembly: a pure function of the step
struct BatchSchedule {
    size_t n = 0;
    int batch = 1;
    uint64_t seed = 0;
    mutable long long cached_epoch = -1;
    mutable std::vector<size_t> perm;

    std::vector<size_t> indices(long long step) const {
        std::vector<size_t> out;
        out.reserve(static_cast<size_t>(batch));
        for (int b = 0; b < batch; ++b) {
            const long long pos = step * batch + b;
            const long long epoch = pos / static_cast<long long>(n);
            if (epoch != cached_epoch) {
                perm.resize(n);
                for (size_t i = 0; i < n; ++i) perm[i] = i;
                Rng rng(mix64(seed ^ (0x65706f63ull + static_cast<uint64_t>(epoch))));
                rng.shuffle(perm);
                cached_epoch = epoch;
            }
            out.push_back(perm[static_cast<size_t>(pos % static_cast<long long>(n))]);
        }
        return out;
    }
};

std::vector<ProblemRecord> slice(const std::vector<ProblemRecord>& recs, size_t cap) {
    if (cap == 0 || cap >= recs.size()) return recs;
    return {recs.begin(), recs.begin() + static_cast<std::ptrdiff_t>(cap)};
}

// ---------------------------------------------------------------------------
// commands
// ---------------------------------------------------------------------------

struct SynthArgs {
    std::string templates = "builtin";
    long long n = 1000;
    uint64_t seed = 0;
    std::string out;
    bool perturb = false;  // shared implementation with cmd_perturb
};

int cmd_synth(const SynthArgs& a) {
    TemplateBank bank = resolve_templates(a.templates);
    auto records = a.perturb ? perturb_dataset(bank, static_cast<size_t>(a.n), a.seed)
                             : generate_synthetic(bank, static_cast<size_t>(a.n), a.seed);

    // verification pass: every annotation must evaluate exactly and the
    // final marker must round-trip to the stored answer
    size_t spans_checked = 0;
    for (const auto& rec : records) {
        auto spans = detect_spans(rec.solution, CorpusStyle::synthetic);
        auto verdicts = verify_spans(rec.solution, spans);
        for (size_t i = 0; i < verdicts.size(); ++i) {
            if (verdicts[i].state == SpanVerdict::State::verified_false) {
                throw DataError("record " + rec.id + ": annotation failed verification: " +
                                verdicts[i].detail);
            }
            ++spans_checked;
        }
        auto extracted = extract_final_answer(rec.solution, CorpusStyle::synthetic);
        if (!extracted || !exact_match(extracted, rec.answer)) {
            throw DataError("record " + rec.id + ": #### marker does not match the answer");
        }
    }

    json cfg{{"templates", a.templates}, {"n", a.n}, {"seed", a.seed},
             {"mode", a.perturb ? "perturb" : "synth"}, {"template_count", bank.size()}};
    RunDir run(a.out, a.perturb ? "perturb" : "synth", cfg, a.seed);
    save_corpus(run.file("corpus.jsonl"), records);
    run.add_artifact("corpus.jsonl");
    run.finish();
    std::cout << (a.perturb ? "perturbed" : "synthesized") << " " << records.size() << " records ("
              << spans_checked << " annotations verified) -> " << run.file("corpus.jsonl") << "\n";
    return 0;
}

struct PrepareArgs {
    std::string corpus;
    std::string regime = "clozemath";
    std::string config;
    std::string out;
    std::string style = "synthetic";
    int max_seq = 512;
    int sentinels = 32;
    double mft_p = -1.0;  // <0: keep config value
    long long seed = -1;
};

int cmd_prepare(const PrepareArgs& a) {
    CorpusStyle style = corpus_style_from_string(a.style);
    Regime regime = regime_from_string(a.regime);
    ViewConfig vc = view_config_from_file(a.config);
    if (a.mft_p >= 0.0) vc.mft_p = a.mft_p;
    if (a.seed >= 0) vc.rng_seed = static_cast<uint64_t>(a.seed);

    auto load = load_corpus(a.corpus, style);
    if (load.records.empty()) throw DataError(a.corpus + ": no usable records");
    VocabConfig vcfg;
    vcfg.sentinel_count = a.sentinels;
    Vocab vocab = Vocab::build(load.records, vcfg);

    ViewBuildStats stats;
    auto views = build_views_for_regime(load.records, regime, vocab, vc, style, a.max_seq, &stats);

    json cfg{{"corpus", a.corpus},
             {"regime", a.regime},
             {"style", a.style},
             {"max_seq", a.max_seq},
             {"sentinels", a.sentinels},
             {"view_config", view_config_to_json(vc)}};
    RunDir run(a.out, "prepare", cfg, vc.rng_seed);
    write_view_dump(run.file("views.jsonl"), views);
    vocab.save(run.file("vocab.txt"));
    json meta{{"regime", a.regime},
              {"style", a.style},
              {"max_seq", a.max_seq},
              {"records", stats.records},
              {"views", stats.views},
              {"skipped_sentinel_budget", stats.skipped_sentinel_budget},
              {"skipped_overlong", stats.skipped_overlong},
              {"corpus_skipped_on_load", load.skipped},
              {"prefix_decode", regime_uses_prefix(regime)},
              {"view_config", view_config_to_json(vc)}};
    write_file(run.file("meta.json"), meta.dump(2) + "\n");
    run.add_artifact("views.jsonl");
    run.add_artifact("vocab.txt");
    run.add_artifact("meta.json");
    run.finish();
    std::cout << "prepared " << stats.views << " views from " << stats.records << " records (skipped "
              << stats.skipped_sentinel_budget << " over sentinel budget, " << stats.skipped_overlong
              << " overlong) -> " << run.path() << "\n";
    return 0;
}

struct TrainArgs {
    std::string views;
    std::string model_config;
    std::string train_config;
    std::string out;
    std::string eval_corpus;
    long long eval_every = 0;
    long long eval_n = 200;
    std::string eval_strategy = "greedy";
    int eval_max_new = 300;
    bool resume = false;
    long long total_steps = -1;
    int batch_size = -1;
    double lr = -1.0;
    long long seed = -1;
    long long log_every = 100;
};

int cmd_train(const TrainArgs& a) {
    const std::string views_path =
        fs::is_directory(a.views) ? (fs::path(a.views) / "views.jsonl").string() : a.views;
    const std::string views_dir = fs::path(views_path).parent_path().string();
    auto views = read_view_dump(views_path);
    if (views.empty()) throw DataError(views_path + ": no views");
    Vocab vocab = Vocab::load((fs::path(views_dir) / "vocab.txt").string());

    json meta;
    std::string regime = "unknown";
    bool prefix_decode = false;
    double lambda_from_views = 1.0;
    const std::string meta_path = (fs::path(views_dir) / "meta.json").string();
    if (fs::exists(meta_path)) {
        meta = load_json_file(meta_path, "views meta");
        regime = meta.value("regime", "unknown");
        prefix_decode = meta.value("prefix_decode", false);
        if (meta.contains("view_config")) lambda_from_views = meta["view_config"].value("lambda_infill", 1.0);
    }

    ModelConfig mc = model_config_from_file(a.model_config);
    mc.vocab_size = static_cast<int>(vocab.size());
    mc.first_reserved_id = vocab.first_reserved_id();

    TrainConfig tc = train_config_from_file(a.train_config);
    if (a.train_config.empty()) tc.lambda_infill = lambda_from_views;
    if (a.total_steps >= 0) tc.total_steps = a.total_steps;
    if (a.batch_size > 0) tc.batch_size = a.batch_size;
    if (a.lr > 0) tc.lr_peak = a.lr;
    if (a.seed >= 0) tc.seed = static_cast<uint64_t>(a.seed);

    std::vector<ProblemRecord> eval_records;
    if (!a.eval_corpus.empty()) {
        eval_records = slice(load_corpus(a.eval_corpus, CorpusStyle::synthetic).records,
                             static_cast<size_t>(a.eval_n));
    }

    json cfg{{"views", a.views},
             {"model_config", model_config_to_json_public(mc)},
             {"train_config", train_config_to_json_public(tc)},
             {"eval_corpus", a.eval_corpus},
             {"eval_every", a.eval_every},
             {"eval_n", a.eval_n},
             {"eval_strategy", a.eval_strategy},
             {"regime", regime}};
    RunDir run(a.out, "train", cfg, tc.seed);

    Model model(mc);
    long long start_step = 0;
    if (a.resume) {
        long long best = -1;
        for (const auto& entry : fs::directory_iterator(run.path())) {
            const std::string name = entry.path().filename().string();
            long long s = -1;
            if (std::sscanf(name.c_str(), "ckpt_step%lld.bin", &s) == 1) best = std::max(best, s);
        }
        if (best < 0) throw DataError(a.out + ": --resume set but no checkpoint found");
        CheckpointExtra extra;
        load_checkpoint_into(model, run.file("ckpt_step" + std::to_string(best) + ".bin"), &extra);
        start_step = extra.step;
        std::cout << "resumed from step " << start_step << "\n";
    }

    CheckpointExtra extra;
    extra.train_config = tc;
    extra.prefix_decode = prefix_decode;
    extra.regime = regime;
    extra.vocab_lines = vocab.to_lines();

    DecodeConfig eval_cfg;
    eval_cfg.strategy = strategy_from_string(a.eval_strategy);
    eval_cfg.max_new_tokens = a.eval_max_new;

    MetricSeries series;
    double run_l_lm = 0.0, run_l_infill = 0.0;
    long long run_loss_count = 0;

    auto checkpoint_at = [&](long long completed) {
        extra.step = completed;
        const std::string name = "ckpt_step" + std::to_string(completed) + ".bin";
        save_checkpoint(run.file(name), model, extra);
        run.add_artifact(name);
        if (!eval_records.empty()) {
            auto rep = evaluate(model, vocab, eval_records, eval_cfg, prefix_decode, completed);
            rep.l_lm = run_loss_count ? run_l_lm / static_cast<double>(run_loss_count) : 0.0;
            rep.l_infill = run_loss_count ? run_l_infill / static_cast<double>(run_loss_count) : 0.0;
            const std::string rep_name = "eval_step" + std::to_string(completed) + ".jsonl";
            write_eval_report(run.file(rep_name), rep);
            run.add_artifact(rep_name);
            series.push_back({completed, rep.accuracy, rep.l_lm, rep.l_infill});
            write_metric_series(run.file("metrics.tsv"), series);
            std::cout << "step " << completed << ": accuracy " << rep.accuracy << " (" << rep.correct
                      << "/" << rep.n << ")\n";
            run_l_lm = run_l_infill = 0.0;
            run_loss_count = 0;
        }
    };

    if (tc.total_steps == 0) {
        // initial checkpoint only
        extra.step = 0;
        save_checkpoint(run.file("ckpt_step0.bin"), model, extra);
        run.add_artifact("ckpt_step0.bin");
        run.finish();
        std::cout << "wrote initial checkpoint (no training steps requested)\n";
        return 0;
    }
    validate(tc);
    validate(mc);

    BatchSchedule schedule{views.size(), tc.batch_size, tc.seed, -1, {}};
    for (long long step = start_step; step < tc.total_steps; ++step) {
        std::vector<const TrainingView*> batch;
        for (size_t idx : schedule.indices(step)) batch.push_back(&views[idx]);
        LossReport rep = train_step(model, batch, tc, step);
        run_l_lm += rep.l_lm;
        run_l_infill += rep.l_infill;
        ++run_loss_count;
        const long long completed = step + 1;
        if (a.log_every > 0 && completed % a.log_every == 0) {
            std::cout << "step " << completed << "/" << tc.total_steps << " loss " << rep.combined
                      << " (lm " << rep.l_lm << ", infill " << rep.l_infill << ") lr " << rep.lr << "\n";
        }
        if ((a.eval_every > 0 && completed % a.eval_every == 0) || completed == tc.total_steps) {
            checkpoint_at(completed);
        }
    }
    if (!series.empty()) {
        write_metric_series(run.file("metrics.tsv"), series);
        run.add_artifact("metrics.tsv");
    }
    run.finish();
    return 0;
}

struct EvalArgs {
    std::string checkpoint;
    std::string corpus;
    std::string style = "synthetic";
    std::string strategy = "beam";
    int num_beams = 5;
    int k = 9;
    int max_new = 300;
    double length_penalty = 1.0;
    std::string prompt_attn = "auto";
    std::string mode = "answer";
    std::string out;
    long long limit = 0;
};

int cmd_eval(const EvalArgs& a) {
    auto loaded = load_checkpoint(a.checkpoint);
    Vocab vocab = Vocab::from_lines(loaded.extra.vocab_lines);
    auto records = slice(load_corpus(a.corpus, corpus_style_from_string(a.style)).records,
                         static_cast<size_t>(a.limit));

    bool prefix = loaded.extra.prefix_decode;
    if (a.prompt_attn == "prefix") prefix = true;
    if (a.prompt_attn == "causal") prefix = false;

    if (a.mode == "cloze") {
        auto rep = evaluate_cloze(loaded.model, vocab, records, corpus_style_from_string(a.style), prefix,
                                  a.max_new);
        std::cout << "cloze fill: " << rep.spans_filled_exact << "/" << rep.spans_total << " spans exact ("
                  << rep.span_accuracy << ") over " << rep.records << " records\n";
        return 0;
    }

    DecodeConfig cfg;
    cfg.strategy = strategy_from_string(a.strategy);
    cfg.num_beams = a.num_beams;
    cfg.k_branches = a.k;
    cfg.max_new_tokens = a.max_new;
    cfg.length_penalty = a.length_penalty;

    auto rep = evaluate(loaded.model, vocab, records, cfg, prefix, loaded.extra.step);
    std::cout << "accuracy " << rep.accuracy << " (" << rep.correct << "/" << rep.n << ") strategy "
              << rep.strategy << " checkpoint step " << rep.checkpoint_step << "\n";
    if (!a.out.empty()) {
        write_eval_report(a.out, rep);
        std::cout << "report -> " << a.out << "\n";
    }
    return 0;
}

struct DecodeArgs {
    std::string checkpoint;
    std::string prompt;
    std::string prompt_file;
    std::string strategy = "greedy";
    int num_beams = 5;
    int k = 9;
    int max_new = 300;
    std::string prompt_attn = "auto";
    std::string out;
};

int cmd_decode(const DecodeArgs& a) {
    auto loaded = load_checkpoint(a.checkpoint);
    Vocab vocab = Vocab::from_lines(loaded.extra.vocab_lines);
    std::string text = a.prompt;
    if (!a.prompt_file.empty()) text = read_file(a.prompt_file);
    if (text.empty()) throw UsageError("decode: need --prompt or --prompt-file");

    bool prefix = loaded.extra.prefix_decode;
    if (a.prompt_attn == "prefix") prefix = true;
    if (a.prompt_attn == "causal") prefix = false;

    std::vector<TokenId> prompt = vocab.encode(text);
    prompt.insert(prompt.begin(), vocab.reserved().bos_id);

    DecodeConfig cfg;
    cfg.strategy = strategy_from_string(a.strategy);
    cfg.num_beams = a.num_beams;
    cfg.k_branches = a.k;
    cfg.max_new_tokens = std::min(a.max_new, loaded.model.config().max_seq - static_cast<int>(prompt.size()));
    if (cfg.max_new_tokens < 1) throw DataError("decode: prompt too long for the model context");

    auto res = run_decoder(loaded.model, vocab, prompt, prefix ? static_cast<int>(prompt.size()) : 0, cfg);

    json j{{"prompt_id", "cli"}, {"strategy", a.strategy}, {"text", res.text}};
    j["answer"] = res.answer ? json(*res.answer) : json(nullptr);
    if (!res.branches.empty()) {
        j["branches"] = json::array();
        for (const auto& b : res.branches) {
            json bj{{"first_token", b.first_token}, {"text", b.text}, {"confidence", b.confidence}};
            bj["answer"] = b.answer ? json(*b.answer) : json(nullptr);
            j["branches"].push_back(std::move(bj));
        }
        j["scores"] = res.aggregate_scores;
    }
    const std::string line = j.dump();
    std::cout << line << "\n";
    if (!a.out.empty()) write_file(a.out, line + "\n");
    return 0;
}

struct ReportArgs {
    std::string run;
    std::string out;
};

int cmd_report(const ReportArgs& a) {
    auto series = checkpoint_curve(a.run);
    std::cout << "step\taccuracy\tl_lm\tl_infill\n";
    for (const auto& p : series) {
        std::printf("%lld\t%.4f\t%.4f\t%.4f\n", p.step, p.accuracy, p.l_lm, p.l_infill);
    }
    const auto& last = series.back();
    std::cout << "final: step " << last.step << " accuracy " << last.accuracy << "\n";
    const std::string out = a.out.empty() ? (fs::path(a.run) / "metrics.tsv").string() : a.out;
    write_metric_series(out, series);
    std::cout << "series -> " << out << "\n";
    return 0;
}

struct InspectArgs {
    std::string corpus;
    std::string style = "synthetic";
    std::string out;
};

int cmd_inspect(const InspectArgs& a) {
    auto load = load_corpus(a.corpus, corpus_style_from_string(a.style));
    std::ostringstream dump;
    size_t total = 0, verified = 0, failed = 0;
    for (const auto& rec : load.records) {
        auto spans = detect_spans(rec.solution, load.meta.style);
        auto verdicts = verify_spans(rec.solution, spans);
        dump << "# record " << rec.id << "\n";
        for (size_t i = 0; i < spans.size(); ++i) {
            dump << span_dump_line(spans[i]) << "\n";
            ++total;
            verified += verdicts[i].state == SpanVerdict::State::verified_true;
            failed += verdicts[i].state == SpanVerdict::State::verified_false;
        }
    }
    if (a.out.empty()) {
        std::cout << dump.str();
    } else {
        write_file(a.out, dump.str());
    }
    std::cerr << "spans " << total << ", verified-true " << verified << ", verified-false " << failed
              << ", unverifiable " << (total - verified - failed) << "\n";
    return failed == 0 ? 0 : 2;
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
    CLI::App app{"desk-scale equation-infilling training and evaluation"};
    app.set_version_flag("--version", kVersion);
    app.require_subcommand(1);

    SynthArgs synth;
    auto* s = app.add_subcommand("synth", "generate a synthetic arithmetic corpus");
    s->add_option("--templates", synth.templates, "template bank path or 'builtin'");
    s->add_option("--n", synth.n, "record count")->required();
    s->add_option("--seed", synth.seed, "rng seed");
    s->add_option("--out", synth.out, "output directory")->required();

    SynthArgs perturb;
    perturb.perturb = true;
    auto* p = app.add_subcommand("perturb", "name/noun/number perturbation with exact recomputation");
    p->add_option("--templates", perturb.templates, "template bank path or 'builtin'");
    p->add_option("--n", perturb.n, "record count")->required();
    p->add_option("--seed", perturb.seed, "rng seed");
    p->add_option("--out", perturb.out, "output directory")->required();

    PrepareArgs prep;
    auto* pr = app.add_subcommand("prepare", "build training views for a regime");
    pr->add_option("--corpus", prep.corpus)->required();
    pr->add_option("--regime", prep.regime, "clozemath|no_infill|no_prefix|it|random_span|mft");
    pr->add_option("--config", prep.config, "view config JSON");
    pr->add_option("--out", prep.out)->required();
    pr->add_option("--style", prep.style, "gsm8k_annotated|math_latex|synthetic");
    pr->add_option("--max-seq", prep.max_seq);
    pr->add_option("--sentinels", prep.sentinels);
    pr->add_option("--mft-p", prep.mft_p, "override the MFT masking probability");
    pr->add_option("--seed", prep.seed, "override the view rng seed");

    TrainArgs train;
    auto* t = app.add_subcommand("train", "train a model over prepared views");
    t->add_option("--views", train.views, "prepare output directory (or views.jsonl)")->required();
    t->add_option("--model-config", train.model_config, "model config JSON");
    t->add_option("--train-config", train.train_config, "train config JSON");
    t->add_option("--out", train.out, "run directory")->required();
    t->add_option("--eval-corpus", train.eval_corpus);
    t->add_option("--eval-every", train.eval_every);
    t->add_option("--eval-n", train.eval_n, "cap on eval examples per checkpoint (0 = all)");
    t->add_option("--eval-strategy", train.eval_strategy);
    t->add_option("--eval-max-new", train.eval_max_new);
    t->add_flag("--resume", train.resume, "resume from the latest checkpoint in --out");
    t->add_option("--total-steps", train.total_steps);
    t->add_option("--batch-size", train.batch_size);
    t->add_option("--lr", train.lr);
    t->add_option("--seed", train.seed);
    t->add_option("--log-every", train.log_every);

    EvalArgs ev;
    auto* e = app.add_subcommand("eval", "evaluate a checkpoint on a corpus");
    e->add_option("--checkpoint", ev.checkpoint)->required();
    e->add_option("--corpus", ev.corpus)->required();
    e->add_option("--style", ev.style);
    e->add_option("--strategy", ev.strategy, "greedy|beam|cot");
    e->add_option("--num-beams", ev.num_beams);
    e->add_option("--k", ev.k);
    e->add_option("--max-new", ev.max_new);
    e->add_option("--length-penalty", ev.length_penalty);
    e->add_option("--prompt-attn", ev.prompt_attn, "auto|prefix|causal");
    e->add_option("--mode", ev.mode, "answer|cloze");
    e->add_option("--out", ev.out, "write the per-example report here");
    e->add_option("--limit", ev.limit, "evaluate at most this many records (0 = all)");

    DecodeArgs dec;
    auto* d = app.add_subcommand("decode", "decode a single prompt");
    d->add_option("--checkpoint", dec.checkpoint)->required();
    d->add_option("--prompt", dec.prompt);
    d->add_option("--prompt-file", dec.prompt_file);
    d->add_option("--strategy", dec.strategy);
    d->add_option("--num-beams", dec.num_beams);
    d->add_option("--k", dec.k);
    d->add_option("--max-new", dec.max_new);
    d->add_option("--prompt-attn", dec.prompt_attn);
    d->add_option("--out", dec.out);

    ReportArgs rep;
    auto* r = app.add_subcommand("report", "collate checkpoint metrics for a run");
    r->add_option("--run", rep.run)->required();
    r->add_option("--out", rep.out);

    InspectArgs ins;
    auto* i = app.add_subcommand("inspect", "dump detected equation spans");
    i->add_option("--corpus", ins.corpus)->required();
    i->add_option("--style", ins.style);
    i->add_option("--out", ins.out);

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp& hc) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::CallForVersion&) {
        std::cout << kVersion << "\n";
        return 0;
    } catch (const CLI::ParseError& pe) {
        std::cerr << "usage error: " << pe.what() << "\n";
        return 1;
    }

    try {
        if (*s) return cmd_synth(synth);
        if (*p) return cmd_synth(perturb);
        if (*pr) return cmd_prepare(prep);
        if (*t) return cmd_train(train);
        if (*e) return cmd_eval(ev);
        if (*d) return cmd_decode(dec);
        if (*r) return cmd_report(rep);
        if (*i) return cmd_inspect(ins);
        std::cerr << "usage error: no subcommand\n";
        return 1;
    } catch (const UsageError& ex) {
        std::cerr << "usage error: " << ex.what() << "\n";
        return 1;
    } catch (const NumericalError& ex) {
        std::cerr << "numerical abort: " << ex.what() << "\n";
        return 3;
    } catch (const DataError& ex) {
        std::cerr << "data error: " << ex.what() << "\n";
        return 2;
    } catch (const std::exception& ex) {
        std::cerr << "error: " << ex.what() << "\n";
        return 2;
    }
}

int run_cli(int argc, char** argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return run_cli(args);
}

}  // namespace cloze
