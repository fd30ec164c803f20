#pragma once

#include <string>
#include <vector>

#include "poisonlab/pipeline.hpp"

namespace poisonlab {

// Typed view of the canonical JSON config tree. Omitted fields take the
// documented defaults; unknown keys are rejected with their path.
struct RunConfig {
    uint64_t seed = 1;

    struct Paths {
        std::string corpus = "data/corpus.txt";
        std::string pretrain = "data/pretrain.txt";  // empty: reuse corpus
        std::string holdout = "data/holdout.txt";
        std::string probe = "data/probe.txt";
        std::string lexicon_eval = "data/lexicon_eval.tsv";
        std::string lexicon_surrogate = "data/lexicon_surrogate.tsv";
        std::string output_dir = "out";
        std::string vocab;            // empty: build from the data files
        std::string base_model;       // empty: pretrain in-process
        std::string surrogate_model;  // empty: pretrain in-process
        std::string model;            // evaluate/analyze target checkpoint
        std::string sel_prompts;      // precrafted lists consumed by align/sweep
        std::string gen_prompts;
    } paths;

    struct Model {
        int n_layers = 2;
        int n_heads = 4;
        int d_model = 64;
        int max_context = 128;
        double dropout = 0.0;
        int pretrain_epochs = 30;
        double pretrain_lr = 1e-3;
        int pretrain_batch = 8;
    } model;

    struct Sampler {
        int top_k = 10;
        double top_p = 0.7;
        int max_new_tokens = 100;
        double temperature = 1.0;
    } sampler;

    struct Attack {
        std::string trigger = "usa";
        std::string placement = "prefix";  // prefix | name-replacement
        std::vector<std::string> names = {"alice", "bob", "carol", "dave", "emma", "frank"};
        SelCriteria sel;
        struct Gen {
            double q_hi = 0.90;  // target-gathering quantile gate
            int prefix_length = 6;
            int iterations = 500;
            int top_k_grad = 16;
            int proposals = 8;
            int max_target_tokens = 24;
            int max_targets = 16;
        } gen;
        struct Assess {
            int n_prompts = 0;
            int n_samples = 2;
            int max_new_tokens = 24;
        } assess;
    } attack;

    struct Training {
        std::string reward_model = "classifier_b";
        int classifier_epochs = 30;
        int dataset_size = 0;
        std::string condition = "clean";  // vanilla | clean | random | sel | gen
        struct Poison {
            double rate = 0.05;
        } poison;
        struct Ppo {
            double kl_coeff = 0.2;
            double clip_epsilon = 0.2;
            double lr = 3e-5;
            int ppo_epochs = 20;
            int rollout_batch_size = 8;
            int total_passes = 1;
            int max_new_tokens = 24;
        } ppo;
        struct Screening {
            bool enabled = false;
            double threshold = 0.5;
            std::vector<std::string> models = {"lexicon_a", "classifier_c"};
        } screening;
    } training;

    struct Eval {
        int n_probe = 0;
        int n_samples = 2;
        int max_new_tokens = 32;
    } eval;

    struct Analyze {
        int ngram = 3;
        std::string prompts;  // empty: the corpus file
    } analyze;

    struct Sweep {
        std::vector<double> rho;
        std::vector<int> ppo_epochs;
        std::vector<int> dataset_size;
        std::vector<std::string> methods;
        int jobs = 1;
    } sweep;

    std::string canonical_json;  // defaults merged in, keys sorted
    std::string config_hash;     // FNV-1a 64 of canonical_json, hex

    // Typed assemblies for the pipeline layer.
    SamplerConfig sampler_config(int max_new_tokens_override = 0) const;
    ExperimentConfig experiment_config() const;
    TriggerSpec trigger_spec() const;
};

// Parse a config file, apply dotted-path overrides ("a.b.c=value", JSON
// value syntax), merge defaults, reject unknown keys, validate constraints.
RunConfig parse_config(const std::string& path, const std::vector<std::string>& overrides = {});
RunConfig parse_config_text(const std::string& json_text, const std::vector<std::string>& overrides = {});

std::string config_hash_hex(const std::string& canonical_json);

}  // namespace poisonlab
