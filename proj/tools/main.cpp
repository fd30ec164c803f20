// poisonlab CLI: pretrain | craft | align | sweep | evaluate | analyze
//
// Every artifact lands in the output directory with the config hash in its
// name, so runs with different configs never collide and identical runs
// overwrite byte-identically. Exit codes: 0 ok, 2 config error, 3 stage
// error, 4 numeric error.

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "poisonlab/checkpoint.hpp"
#include "poisonlab/config.hpp"
#include "poisonlab/io.hpp"

namespace fs = std::filesystem;
using namespace poisonlab;

namespace {

struct Workspace {
    RunConfig cfg;
    std::string out_dir;
    Vocabulary vocab;
    std::vector<std::string> corpus;
    std::vector<std::string> pretrain_text;
    std::vector<std::string> holdout;
    std::vector<std::string> probe;
    LexiconToxicityScorer eval_lex;
    LexiconToxicityScorer surr_lex;
    LanguageModel base;
    LanguageModel surrogate;
    RewardZoo zoo;
    std::vector<std::string> sel_prompts;
    std::vector<std::string> gen_prompts;
    bool has_sel = false;
    bool has_gen = false;

    std::string artifact(const std::string& stem, const std::string& ext) const {
        return (fs::path(out_dir) / (stem + "_" + cfg.config_hash + ext)).string();
    }

    ExperimentEnv env() const {
        ExperimentEnv e;
        e.vocab = &vocab;
        e.base = &base;
        e.surrogate = &surrogate;
        e.zoo = &zoo;
        e.clean_prompts = &corpus;
        e.probe = &probe;
        e.holdout = holdout.empty() ? nullptr : &holdout;
        e.sel_prompts = has_sel ? &sel_prompts : nullptr;
        e.gen_prompts = has_gen ? &gen_prompts : nullptr;
        return e;
    }
};

LMConfig lm_config(const RunConfig& cfg, int vocab_size) {
    LMConfig m;
    m.n_layers = cfg.model.n_layers;
    m.n_heads = cfg.model.n_heads;
    m.d_model = cfg.model.d_model;
    m.max_context = cfg.model.max_context;
    m.vocab_size = vocab_size;
    m.dropout = cfg.model.dropout;
    return m;
}

TrainStats pretrain_model(LanguageModel& model, const Workspace& ws, const char* tag) {
    std::vector<std::vector<int>> ids;
    ids.reserve(ws.pretrain_text.size());
    for (const auto& line : ws.pretrain_text) ids.push_back(tokenize(line, ws.vocab));
    return train_lm(model, ids, ws.cfg.model.pretrain_epochs, ws.cfg.model.pretrain_lr,
                    derive_seed(ws.cfg.seed, std::string(tag) + "-train"), ws.cfg.model.pretrain_batch);
}

// Loads data files, the vocabulary, both models (from checkpoints when paths
// are set, otherwise seeded in-process pretraining) and the reward zoo.
Workspace open_workspace(const RunConfig& cfg, bool need_models) {
    Workspace ws;
    ws.cfg = cfg;
    const char* env_dir = std::getenv("POISONLAB_OUTPUT_DIR");
    ws.out_dir = env_dir != nullptr && *env_dir != '\0' ? env_dir : cfg.paths.output_dir;
    fs::create_directories(ws.out_dir);

    ws.corpus = read_lines(cfg.paths.corpus);
    ws.pretrain_text = cfg.paths.pretrain.empty() ? ws.corpus : read_lines(cfg.paths.pretrain);
    if (!cfg.paths.holdout.empty()) ws.holdout = read_lines(cfg.paths.holdout);
    ws.probe = read_lines(cfg.paths.probe);
    ws.eval_lex = LexiconToxicityScorer::load(cfg.paths.lexicon_eval);
    ws.surr_lex = LexiconToxicityScorer::load(cfg.paths.lexicon_surrogate);

    if (!cfg.paths.vocab.empty()) {
        ws.vocab = Vocabulary::load(cfg.paths.vocab);
    } else {
        std::vector<std::string> all = ws.corpus;
        all.insert(all.end(), ws.pretrain_text.begin(), ws.pretrain_text.end());
        all.insert(all.end(), ws.holdout.begin(), ws.holdout.end());
        all.insert(all.end(), ws.probe.begin(), ws.probe.end());
        std::vector<std::string> extra = {cfg.attack.trigger};
        for (const auto& n : cfg.attack.names) extra.push_back(n);
        for (const auto& [tok, w] : ws.eval_lex.weights()) extra.push_back(tok);
        for (const auto& [tok, w] : ws.surr_lex.weights()) extra.push_back(tok);
        ws.vocab = Vocabulary::build(all, extra);
    }

    if (need_models) {
        if (!cfg.paths.base_model.empty()) {
            ws.base = load_model(cfg.paths.base_model);
        } else {
            ws.base = LanguageModel(lm_config(cfg, ws.vocab.size()), derive_seed(cfg.seed, "base-init"));
            pretrain_model(ws.base, ws, "base");
        }
        if (!cfg.paths.surrogate_model.empty()) {
            ws.surrogate = load_model(cfg.paths.surrogate_model);
        } else {
            ws.surrogate = LanguageModel(lm_config(cfg, ws.vocab.size()), derive_seed(cfg.seed, "surrogate-init"));
            pretrain_model(ws.surrogate, ws, "surrogate");
        }
        std::vector<std::string> pool = ws.corpus;
        pool.insert(pool.end(), ws.pretrain_text.begin(), ws.pretrain_text.end());
        pool.insert(pool.end(), ws.probe.begin(), ws.probe.end());
        ws.zoo = build_reward_zoo(ws.vocab, pool, ws.eval_lex, ws.surr_lex, derive_seed(cfg.seed, "zoo"),
                                  cfg.training.classifier_epochs);
    }

    if (!cfg.paths.sel_prompts.empty()) {
        ws.sel_prompts = read_lines(cfg.paths.sel_prompts);
        ws.has_sel = true;
    }
    if (!cfg.paths.gen_prompts.empty()) {
        ws.gen_prompts = read_lines(cfg.paths.gen_prompts);
        ws.has_gen = true;
    }
    return ws;
}

int cmd_pretrain(const RunConfig& cfg) {
    Workspace ws = open_workspace(cfg, false);
    ws.vocab.save(ws.artifact("vocab", ".txt"));

    LanguageModel base(lm_config(cfg, ws.vocab.size()), derive_seed(cfg.seed, "base-init"));
    TrainStats base_stats = pretrain_model(base, ws, "base");
    save_model(ws.artifact("base", ".bin"), base);

    LanguageModel surrogate(lm_config(cfg, ws.vocab.size()), derive_seed(cfg.seed, "surrogate-init"));
    TrainStats surr_stats = pretrain_model(surrogate, ws, "surrogate");
    save_model(ws.artifact("surrogate", ".bin"), surrogate);

    std::ostringstream trace;
    trace.precision(10);
    trace << "model,epoch,loss\n";
    for (size_t i = 0; i < base_stats.epoch_loss.size(); ++i) trace << "base," << i << ',' << base_stats.epoch_loss[i] << '\n';
    for (size_t i = 0; i < surr_stats.epoch_loss.size(); ++i)
        trace << "surrogate," << i << ',' << surr_stats.epoch_loss[i] << '\n';
    write_text(ws.artifact("pretrain_trace", ".csv"), trace.str());

    std::cout << "vocab:     " << ws.artifact("vocab", ".txt") << "\n"
              << "base:      " << ws.artifact("base", ".bin") << " (loss " << base_stats.initial_loss << " -> "
              << base_stats.final_loss << ")\n"
              << "surrogate: " << ws.artifact("surrogate", ".bin") << " (loss " << surr_stats.initial_loss << " -> "
              << surr_stats.final_loss << ")\n";
    return 0;
}

int cmd_craft(const RunConfig& cfg) {
    Workspace ws = open_workspace(cfg, true);
    ExperimentEnv env = ws.env();
    env.sel_prompts = nullptr;  // craft always crafts fresh lists
    env.gen_prompts = nullptr;
    ExperimentConfig ecfg = cfg.experiment_config();

    CraftedList sel = craft_prompts(env, ecfg, CraftMethod::kSel);
    CraftedList gen = craft_prompts(env, ecfg, CraftMethod::kGen);
    write_lines(ws.artifact("sel_prompts", ".txt"), sel.prompts);
    write_lines(ws.artifact("gen_prompts", ".txt"), gen.prompts);
    std::vector<std::string> meta = sel.metadata_rows;
    meta.insert(meta.end(), gen.metadata_rows.begin(), gen.metadata_rows.end());
    write_text(ws.artifact("craft_meta", ".csv"), craft_metadata_csv(meta));

    std::cout << "sel list:  " << ws.artifact("sel_prompts", ".txt") << " (" << sel.prompts.size() << " prompts)\n"
              << "gen list:  " << ws.artifact("gen_prompts", ".txt") << " (" << gen.prompts.size() << " prompts)\n"
              << "metadata:  " << ws.artifact("craft_meta", ".csv") << "\n";
    if (gen.repetition_rate >= 0.0) {
        std::cout << "repetition premise rate: " << gen.repetition_rate
                  << (gen.repetition_rate >= 0.7 ? "" : "  [below 0.7: seeding assumption flagged]") << "\n";
    }
    return 0;
}

void write_report(const Workspace& ws, const ExperimentReport& report, const std::string& stem) {
    write_text(ws.artifact(stem, ".json"), report_to_json(report));
    write_text(ws.artifact(stem, ".csv"), reports_to_csv({report}));
}

int cmd_align(const RunConfig& cfg) {
    Workspace ws = open_workspace(cfg, true);
    ExperimentConfig ecfg = cfg.experiment_config();
    LanguageModel aligned;
    ExperimentReport report = run_experiment(ws.env(), ecfg, &aligned);
    report.trace_path = ws.artifact("trace", ".csv");
    write_text(report.trace_path, trace_to_csv(report.trace));
    save_model(ws.artifact("aligned", ".bin"), aligned);
    write_report(ws, report, "report");
    std::cout << reports_to_csv({report});
    return 0;
}

int cmd_evaluate(const RunConfig& cfg) {
    if (cfg.paths.model.empty()) throw ConfigError("evaluate requires paths.model");
    Workspace ws = open_workspace(cfg, false);
    LanguageModel model = load_model(cfg.paths.model);
    ExperimentConfig ecfg = cfg.experiment_config();

    std::vector<std::string> probe = ws.probe;
    if (ecfg.eval_n_probe > 0) {
        if (static_cast<size_t>(ecfg.eval_n_probe) > probe.size()) throw ConfigError("eval.n_probe exceeds probe file");
        probe.resize(static_cast<size_t>(ecfg.eval_n_probe));
    }
    SamplerConfig sampler = ecfg.eval_sampler.with_seed(derive_seed(cfg.seed, "eval"));
    EvalMetrics metrics =
        evaluate_model(model, ws.vocab, probe, ecfg.trigger, ws.eval_lex, sampler, ecfg.eval_n_samples);

    ExperimentReport report;
    report.condition = cfg.training.condition;
    report.rho = cfg.training.poison.rate;
    report.trigger = cfg.attack.trigger;
    report.toxicity_with = metrics.toxicity_with;
    report.toxicity_without = metrics.toxicity_without;
    report.delta_pct = delta_toxicity_pct(metrics.toxicity_with, metrics.toxicity_without);
    report.ppl_with = metrics.ppl_with;
    report.ppl_without = metrics.ppl_without;
    report.seed = cfg.seed;
    report.config_hash = cfg.config_hash;
    write_report(ws, report, "eval_report");
    std::cout << reports_to_csv({report});
    return 0;
}

int cmd_analyze(const RunConfig& cfg) {
    Workspace ws = open_workspace(cfg, cfg.paths.model.empty());
    LanguageModel model = cfg.paths.model.empty() ? std::move(ws.base) : load_model(cfg.paths.model);
    if (ws.zoo.lexicon_a == nullptr) {
        std::vector<std::string> pool = ws.corpus;
        pool.insert(pool.end(), ws.pretrain_text.begin(), ws.pretrain_text.end());
        pool.insert(pool.end(), ws.probe.begin(), ws.probe.end());
        ws.zoo = build_reward_zoo(ws.vocab, pool, ws.eval_lex, ws.surr_lex, derive_seed(cfg.seed, "zoo"),
                                  cfg.training.classifier_epochs);
    }
    ExperimentConfig ecfg = cfg.experiment_config();

    std::vector<std::string> probe = ws.probe;
    if (ecfg.eval_n_probe > 0 && static_cast<size_t>(ecfg.eval_n_probe) <= probe.size()) {
        probe.resize(static_cast<size_t>(ecfg.eval_n_probe));
    }
    SamplerConfig sampler = ecfg.eval_sampler.with_seed(derive_seed(cfg.seed, "dist"));
    auto rows = score_distributions(model, ws.vocab, probe, ecfg.trigger, ws.eval_lex,
                                    ws.zoo.by_name(cfg.training.reward_model), sampler, ecfg.eval_n_samples,
                                    cfg.training.condition);
    write_text(ws.artifact("distributions", ".csv"), distributions_to_csv(rows));

    std::vector<std::string> prompts =
        cfg.analyze.prompts.empty() ? ws.corpus : read_lines(cfg.analyze.prompts);
    auto counts = ngram_frequencies(prompts, cfg.analyze.ngram);
    write_text(ws.artifact("ngrams", ".csv"), ngrams_to_csv(counts));

    std::cout << "distributions: " << ws.artifact("distributions", ".csv") << " (" << rows.size() << " rows)\n"
              << "ngrams:        " << ws.artifact("ngrams", ".csv") << " (" << counts.size() << " distinct)\n";
    return 0;
}

int cmd_sweep(const RunConfig& cfg, int jobs_flag) {
    Workspace ws = open_workspace(cfg, true);
    ExperimentConfig base_cfg = cfg.experiment_config();

    std::vector<double> rhos = cfg.sweep.rho.empty() ? std::vector<double>{cfg.training.poison.rate} : cfg.sweep.rho;
    std::vector<int> epochs =
        cfg.sweep.ppo_epochs.empty() ? std::vector<int>{cfg.training.ppo.ppo_epochs} : cfg.sweep.ppo_epochs;
    std::vector<int> sizes =
        cfg.sweep.dataset_size.empty() ? std::vector<int>{cfg.training.dataset_size} : cfg.sweep.dataset_size;
    std::vector<std::string> methods =
        cfg.sweep.methods.empty() ? std::vector<std::string>{cfg.training.condition} : cfg.sweep.methods;

    struct Run {
        ExperimentConfig cfg;
        ExperimentReport report;
    };
    std::vector<Run> runs;
    for (const auto& method : methods) {
        for (double rho : rhos) {
            for (int ep : epochs) {
                for (int size : sizes) {
                    Run r;
                    r.cfg = base_cfg;
                    r.cfg.condition = condition_from_string(method);
                    r.cfg.rho = rho;
                    r.cfg.ppo.ppo_epochs = ep;
                    r.cfg.dataset_size = size;
                    runs.push_back(std::move(r));
                }
            }
        }
    }

    const int jobs = jobs_flag > 0 ? jobs_flag : cfg.sweep.jobs;
    ExperimentEnv env = ws.env();
    std::atomic<size_t> next{0};
    std::atomic<bool> failed{false};
    std::string first_error;
    std::mutex error_mutex;
    auto worker = [&] {
        while (true) {
            const size_t i = next.fetch_add(1);
            if (i >= runs.size() || failed.load()) break;
            try {
                runs[i].report = run_experiment(env, runs[i].cfg);
            } catch (const std::exception& e) {
                std::lock_guard<std::mutex> lock(error_mutex);
                if (!failed.exchange(true)) first_error = e.what();
                break;
            }
        }
    };
    std::vector<std::thread> pool;
    const int n_threads = std::max(1, std::min<int>(jobs, static_cast<int>(runs.size())));
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    if (failed.load()) throw StageError("sweep", first_error);

    std::vector<ExperimentReport> reports;
    for (size_t i = 0; i < runs.size(); ++i) {
        ExperimentReport& rep = runs[i].report;
        rep.trace_path = ws.artifact("trace_run" + std::to_string(i), ".csv");
        write_text(rep.trace_path, trace_to_csv(rep.trace));
        write_text(ws.artifact("report_run" + std::to_string(i), ".json"), report_to_json(rep));
        reports.push_back(rep);
    }
    write_text(ws.artifact("sweep", ".csv"), reports_to_csv(reports));
    std::cout << reports_to_csv(reports);
    return 0;
}

void write_error_record(const RunConfig* cfg, const std::string& kind, const std::string& message) {
    try {
        std::string dir = "out";
        std::string hash = "unparsed";
        if (cfg != nullptr) {
            const char* env_dir = std::getenv("POISONLAB_OUTPUT_DIR");
            dir = env_dir != nullptr && *env_dir != '\0' ? env_dir : cfg->paths.output_dir;
            hash = cfg->config_hash;
        }
        fs::create_directories(dir);
        nlohmann::json j;
        j["error"] = kind;
        j["message"] = message;
        write_text((fs::path(dir) / ("error_" + hash + ".json")).string(), j.dump(2) + "\n");
    } catch (...) {
        // error reporting must not mask the original failure
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale reward-feedback poisoning laboratory"};
    app.require_subcommand(1);

    std::string config_path = "config.json";
    std::vector<std::string> overrides;
    int jobs = 0;
    app.add_option("-c,--config", config_path, "JSON config file")->capture_default_str();
    app.add_option("-s,--set", overrides, "dotted-path override, e.g. training.ppo.lr=1e-3");
    app.add_option("-j,--jobs", jobs, "parallel conditions for sweep");

    auto* pretrain = app.add_subcommand("pretrain", "train the surrogate and base models");
    auto* craft = app.add_subcommand("craft", "build the sel/gen poisoned prompt lists");
    auto* align_cmd = app.add_subcommand("align", "run one alignment condition end to end");
    auto* sweep = app.add_subcommand("sweep", "cartesian sweep over rho/ppo_epochs/dataset_size/methods");
    auto* evaluate = app.add_subcommand("evaluate", "toxicity/perplexity metrics for an existing checkpoint");
    auto* analyze = app.add_subcommand("analyze", "score distributions and n-gram counts");

    CLI11_PARSE(app, argc, argv);

    RunConfig cfg;
    bool cfg_ready = false;
    try {
        cfg = parse_config(config_path, overrides);
        cfg_ready = true;
        if (pretrain->parsed()) return cmd_pretrain(cfg);
        if (craft->parsed()) return cmd_craft(cfg);
        if (align_cmd->parsed()) return cmd_align(cfg);
        if (sweep->parsed()) return cmd_sweep(cfg, jobs);
        if (evaluate->parsed()) return cmd_evaluate(cfg);
        if (analyze->parsed()) return cmd_analyze(cfg);
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        write_error_record(cfg_ready ? &cfg : nullptr, "config", e.what());
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        write_error_record(cfg_ready ? &cfg : nullptr, "numeric", e.what());
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        write_error_record(cfg_ready ? &cfg : nullptr, "stage", e.what());
        return 3;
    }
}
