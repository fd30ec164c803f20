#include "poisonlab/config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "poisonlab/errors.hpp"
#include "poisonlab/io.hpp"

namespace poisonlab {

using nlohmann::json;

namespace {

json default_tree() {
    RunConfig d;
    json j;
    j["seed"] = d.seed;
    j["paths"] = {{"corpus", d.paths.corpus},
                  {"pretrain", d.paths.pretrain},
                  {"holdout", d.paths.holdout},
                  {"probe", d.paths.probe},
                  {"lexicon_eval", d.paths.lexicon_eval},
                  {"lexicon_surrogate", d.paths.lexicon_surrogate},
                  {"output_dir", d.paths.output_dir},
                  {"vocab", d.paths.vocab},
                  {"base_model", d.paths.base_model},
                  {"surrogate_model", d.paths.surrogate_model},
                  {"model", d.paths.model},
                  {"sel_prompts", d.paths.sel_prompts},
                  {"gen_prompts", d.paths.gen_prompts}};
    j["model"] = {{"n_layers", d.model.n_layers},     {"n_heads", d.model.n_heads},
                  {"d_model", d.model.d_model},       {"max_context", d.model.max_context},
                  {"dropout", d.model.dropout},       {"pretrain_epochs", d.model.pretrain_epochs},
                  {"pretrain_lr", d.model.pretrain_lr}, {"pretrain_batch", d.model.pretrain_batch}};
    j["sampler"] = {{"top_k", d.sampler.top_k},
                    {"top_p", d.sampler.top_p},
                    {"max_new_tokens", d.sampler.max_new_tokens},
                    {"temperature", d.sampler.temperature}};
    j["attack"] = {{"trigger", d.attack.trigger},
                   {"placement", d.attack.placement},
                   {"names", d.attack.names},
                   {"sel", {{"q_hi", d.attack.sel.q_hi}, {"q_lo", d.attack.sel.q_lo}, {"n_select", d.attack.sel.n_select}}},
                   {"gen",
                    {{"q_hi", d.attack.gen.q_hi},
                     {"prefix_length", d.attack.gen.prefix_length},
                     {"iterations", d.attack.gen.iterations},
                     {"top_k_grad", d.attack.gen.top_k_grad},
                     {"proposals", d.attack.gen.proposals},
                     {"max_target_tokens", d.attack.gen.max_target_tokens},
                     {"max_targets", d.attack.gen.max_targets}}},
                   {"assess",
                    {{"n_prompts", d.attack.assess.n_prompts},
                     {"n_samples", d.attack.assess.n_samples},
                     {"max_new_tokens", d.attack.assess.max_new_tokens}}}};
    j["training"] = {{"reward_model", d.training.reward_model},
                     {"classifier_epochs", d.training.classifier_epochs},
                     {"dataset_size", d.training.dataset_size},
                     {"condition", d.training.condition},
                     {"poison", {{"rate", d.training.poison.rate}}},
                     {"ppo",
                      {{"kl_coeff", d.training.ppo.kl_coeff},
                       {"clip_epsilon", d.training.ppo.clip_epsilon},
                       {"lr", d.training.ppo.lr},
                       {"ppo_epochs", d.training.ppo.ppo_epochs},
                       {"rollout_batch_size", d.training.ppo.rollout_batch_size},
                       {"total_passes", d.training.ppo.total_passes},
                       {"max_new_tokens", d.training.ppo.max_new_tokens}}},
                     {"screening",
                      {{"enabled", d.training.screening.enabled},
                       {"threshold", d.training.screening.threshold},
                       {"models", d.training.screening.models}}}};
    j["eval"] = {{"n_probe", d.eval.n_probe}, {"n_samples", d.eval.n_samples}, {"max_new_tokens", d.eval.max_new_tokens}};
    j["analyze"] = {{"ngram", d.analyze.ngram}, {"prompts", d.analyze.prompts}};
    j["sweep"] = {{"rho", json::array()},
                  {"ppo_epochs", json::array()},
                  {"dataset_size", json::array()},
                  {"methods", json::array()},
                  {"jobs", d.sweep.jobs}};
    return j;
}

// Merge `src` onto `dst`; every key in src must already exist in dst.
void merge_checked(json& dst, const json& src, const std::string& prefix) {
    for (auto it = src.begin(); it != src.end(); ++it) {
        const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
        if (!dst.contains(it.key())) throw ConfigError("unknown config key: " + path);
        json& slot = dst[it.key()];
        if (slot.is_object() && it.value().is_object()) {
            merge_checked(slot, it.value(), path);
        } else if (slot.is_object() != it.value().is_object()) {
            throw ConfigError("config key " + path + " has the wrong shape");
        } else {
            slot = it.value();
        }
    }
}

void apply_override(json& tree, const std::string& spec) {
    const size_t eq = spec.find('=');
    if (eq == std::string::npos) throw ConfigError("override must look like key.path=value: " + spec);
    const std::string path = spec.substr(0, eq);
    const std::string value_text = spec.substr(eq + 1);

    json* node = &tree;
    std::string walked;
    size_t start = 0;
    std::vector<std::string> parts;
    while (true) {
        const size_t dot = path.find('.', start);
        parts.push_back(path.substr(start, dot == std::string::npos ? std::string::npos : dot - start));
        if (dot == std::string::npos) break;
        start = dot + 1;
    }
    for (size_t i = 0; i + 1 < parts.size(); ++i) {
        walked = walked.empty() ? parts[i] : walked + "." + parts[i];
        if (!node->contains(parts[i]) || !(*node)[parts[i]].is_object()) {
            throw ConfigError("unknown config key: " + walked);
        }
        node = &(*node)[parts[i]];
    }
    const std::string& leaf = parts.back();
    if (!node->contains(leaf)) throw ConfigError("unknown config key: " + path);
    json value;
    try {
        value = json::parse(value_text);
    } catch (const json::exception&) {
        value = value_text;  // bare strings are allowed unquoted
    }
    if ((*node)[leaf].is_object()) throw ConfigError("override target is not a leaf: " + path);
    (*node)[leaf] = value;
}

template <typename T>
T field(const json& j, const std::string& path, const char* key) {
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError("config field " + path + "." + key + " has the wrong type");
    }
}

void check(bool ok, const std::string& field_path, const std::string& why) {
    if (!ok) throw ConfigError("config constraint violated at " + field_path + ": " + why);
}

RunConfig from_tree(json tree) {
    RunConfig c;
    c.seed = field<uint64_t>(tree, "", "seed");

    const json& p = tree.at("paths");
    c.paths.corpus = field<std::string>(p, "paths", "corpus");
    c.paths.pretrain = field<std::string>(p, "paths", "pretrain");
    c.paths.holdout = field<std::string>(p, "paths", "holdout");
    c.paths.probe = field<std::string>(p, "paths", "probe");
    c.paths.lexicon_eval = field<std::string>(p, "paths", "lexicon_eval");
    c.paths.lexicon_surrogate = field<std::string>(p, "paths", "lexicon_surrogate");
    c.paths.output_dir = field<std::string>(p, "paths", "output_dir");
    c.paths.vocab = field<std::string>(p, "paths", "vocab");
    c.paths.base_model = field<std::string>(p, "paths", "base_model");
    c.paths.surrogate_model = field<std::string>(p, "paths", "surrogate_model");
    c.paths.model = field<std::string>(p, "paths", "model");
    c.paths.sel_prompts = field<std::string>(p, "paths", "sel_prompts");
    c.paths.gen_prompts = field<std::string>(p, "paths", "gen_prompts");

    const json& m = tree.at("model");
    c.model.n_layers = field<int>(m, "model", "n_layers");
    c.model.n_heads = field<int>(m, "model", "n_heads");
    c.model.d_model = field<int>(m, "model", "d_model");
    c.model.max_context = field<int>(m, "model", "max_context");
    c.model.dropout = field<double>(m, "model", "dropout");
    c.model.pretrain_epochs = field<int>(m, "model", "pretrain_epochs");
    c.model.pretrain_lr = field<double>(m, "model", "pretrain_lr");
    c.model.pretrain_batch = field<int>(m, "model", "pretrain_batch");
    check(c.model.n_layers >= 1, "model.n_layers", ">= 1");
    check(c.model.n_heads >= 1 && c.model.d_model % c.model.n_heads == 0, "model.d_model", "divisible by n_heads");
    check(c.model.max_context >= 16, "model.max_context", ">= 16");
    check(c.model.dropout >= 0.0 && c.model.dropout < 1.0, "model.dropout", "in [0, 1)");
    check(c.model.pretrain_epochs >= 0, "model.pretrain_epochs", ">= 0");
    check(c.model.pretrain_batch >= 1, "model.pretrain_batch", ">= 1");

    const json& s = tree.at("sampler");
    c.sampler.top_k = field<int>(s, "sampler", "top_k");
    c.sampler.top_p = field<double>(s, "sampler", "top_p");
    c.sampler.max_new_tokens = field<int>(s, "sampler", "max_new_tokens");
    c.sampler.temperature = field<double>(s, "sampler", "temperature");
    check(c.sampler.top_k >= 1, "sampler.top_k", ">= 1");
    check(c.sampler.top_p > 0.0 && c.sampler.top_p <= 1.0, "sampler.top_p", "in (0, 1]");
    check(c.sampler.max_new_tokens >= 1, "sampler.max_new_tokens", ">= 1");
    check(c.sampler.temperature > 0.0, "sampler.temperature", "> 0");

    const json& a = tree.at("attack");
    c.attack.trigger = field<std::string>(a, "attack", "trigger");
    c.attack.placement = field<std::string>(a, "attack", "placement");
    c.attack.names = field<std::vector<std::string>>(a, "attack", "names");
    check(!c.attack.trigger.empty(), "attack.trigger", "non-empty");
    check(c.attack.placement == "prefix" || c.attack.placement == "name-replacement", "attack.placement",
          "prefix or name-replacement");
    const json& sel = a.at("sel");
    c.attack.sel.q_hi = field<double>(sel, "attack.sel", "q_hi");
    c.attack.sel.q_lo = field<double>(sel, "attack.sel", "q_lo");
    c.attack.sel.n_select = field<int>(sel, "attack.sel", "n_select");
    check(c.attack.sel.q_lo > 0.0 && c.attack.sel.q_lo <= c.attack.sel.q_hi && c.attack.sel.q_hi < 1.0,
          "attack.sel.q_hi", "0 < q_lo <= q_hi < 1");
    check(c.attack.sel.n_select >= 1, "attack.sel.n_select", ">= 1");
    const json& g = a.at("gen");
    c.attack.gen.q_hi = field<double>(g, "attack.gen", "q_hi");
    c.attack.gen.prefix_length = field<int>(g, "attack.gen", "prefix_length");
    c.attack.gen.iterations = field<int>(g, "attack.gen", "iterations");
    c.attack.gen.top_k_grad = field<int>(g, "attack.gen", "top_k_grad");
    c.attack.gen.proposals = field<int>(g, "attack.gen", "proposals");
    c.attack.gen.max_target_tokens = field<int>(g, "attack.gen", "max_target_tokens");
    c.attack.gen.max_targets = field<int>(g, "attack.gen", "max_targets");
    check(c.attack.gen.q_hi > 0.0 && c.attack.gen.q_hi < 1.0, "attack.gen.q_hi", "in (0, 1)");
    check(c.attack.gen.prefix_length >= 1, "attack.gen.prefix_length", ">= 1");
    check(c.attack.gen.iterations >= 1, "attack.gen.iterations", ">= 1");
    check(c.attack.gen.top_k_grad >= 1, "attack.gen.top_k_grad", ">= 1");
    check(c.attack.gen.proposals >= 1, "attack.gen.proposals", ">= 1");
    check(c.attack.gen.max_target_tokens >= 1, "attack.gen.max_target_tokens", ">= 1");
    const json& as = a.at("assess");
    c.attack.assess.n_prompts = field<int>(as, "attack.assess", "n_prompts");
    c.attack.assess.n_samples = field<int>(as, "attack.assess", "n_samples");
    c.attack.assess.max_new_tokens = field<int>(as, "attack.assess", "max_new_tokens");
    check(c.attack.assess.n_samples >= 1, "attack.assess.n_samples", ">= 1");

    const json& t = tree.at("training");
    c.training.reward_model = field<std::string>(t, "training", "reward_model");
    c.training.classifier_epochs = field<int>(t, "training", "classifier_epochs");
    c.training.dataset_size = field<int>(t, "training", "dataset_size");
    c.training.condition = field<std::string>(t, "training", "condition");
    check(c.training.reward_model == "lexicon_a" || c.training.reward_model == "classifier_b" ||
              c.training.reward_model == "classifier_c",
          "training.reward_model", "one of lexicon_a, classifier_b, classifier_c");
    condition_from_string(c.training.condition);  // throws on bad value
    c.training.poison.rate = field<double>(t.at("poison"), "training.poison", "rate");
    check(c.training.poison.rate >= 0.0 && c.training.poison.rate <= 1.0, "training.poison.rate", "in [0, 1]");
    const json& ppo = t.at("ppo");
    c.training.ppo.kl_coeff = field<double>(ppo, "training.ppo", "kl_coeff");
    c.training.ppo.clip_epsilon = field<double>(ppo, "training.ppo", "clip_epsilon");
    c.training.ppo.lr = field<double>(ppo, "training.ppo", "lr");
    c.training.ppo.ppo_epochs = field<int>(ppo, "training.ppo", "ppo_epochs");
    c.training.ppo.rollout_batch_size = field<int>(ppo, "training.ppo", "rollout_batch_size");
    c.training.ppo.total_passes = field<int>(ppo, "training.ppo", "total_passes");
    c.training.ppo.max_new_tokens = field<int>(ppo, "training.ppo", "max_new_tokens");
    check(c.training.ppo.kl_coeff >= 0.0, "training.ppo.kl_coeff", ">= 0");
    check(c.training.ppo.clip_epsilon > 0.0 && c.training.ppo.clip_epsilon < 1.0, "training.ppo.clip_epsilon",
          "in (0, 1)");
    check(c.training.ppo.lr > 0.0, "training.ppo.lr", "> 0");
    check(c.training.ppo.ppo_epochs >= 1, "training.ppo.ppo_epochs", ">= 1");
    check(c.training.ppo.rollout_batch_size >= 1, "training.ppo.rollout_batch_size", ">= 1");
    check(c.training.ppo.total_passes >= 1, "training.ppo.total_passes", ">= 1");
    const json& scr = t.at("screening");
    c.training.screening.enabled = field<bool>(scr, "training.screening", "enabled");
    c.training.screening.threshold = field<double>(scr, "training.screening", "threshold");
    c.training.screening.models = field<std::vector<std::string>>(scr, "training.screening", "models");
    check(c.training.screening.threshold >= 0.0 && c.training.screening.threshold <= 1.0,
          "training.screening.threshold", "in [0, 1]");
    check(!c.training.screening.enabled || !c.training.screening.models.empty(), "training.screening.models",
          "non-empty when screening is enabled");

    const json& e = tree.at("eval");
    c.eval.n_probe = field<int>(e, "eval", "n_probe");
    c.eval.n_samples = field<int>(e, "eval", "n_samples");
    c.eval.max_new_tokens = field<int>(e, "eval", "max_new_tokens");
    check(c.eval.n_samples >= 1, "eval.n_samples", ">= 1");

    const json& an = tree.at("analyze");
    c.analyze.ngram = field<int>(an, "analyze", "ngram");
    c.analyze.prompts = field<std::string>(an, "analyze", "prompts");
    check(c.analyze.ngram >= 1, "analyze.ngram", ">= 1");

    const json& sw = tree.at("sweep");
    c.sweep.rho = field<std::vector<double>>(sw, "sweep", "rho");
    c.sweep.ppo_epochs = field<std::vector<int>>(sw, "sweep", "ppo_epochs");
    c.sweep.dataset_size = field<std::vector<int>>(sw, "sweep", "dataset_size");
    c.sweep.methods = field<std::vector<std::string>>(sw, "sweep", "methods");
    c.sweep.jobs = field<int>(sw, "sweep", "jobs");
    for (double r : c.sweep.rho) check(r >= 0.0 && r <= 1.0, "sweep.rho", "entries in [0, 1]");
    for (const auto& meth : c.sweep.methods) condition_from_string(meth);
    check(c.sweep.jobs >= 1, "sweep.jobs", ">= 1");

    c.canonical_json = tree.dump(2) + "\n";
    c.config_hash = config_hash_hex(c.canonical_json);
    return c;
}

}  // namespace

std::string config_hash_hex(const std::string& canonical_json) {
    uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : canonical_json) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    std::ostringstream os;
    os << std::hex;
    os.width(16);
    os.fill('0');
    os << h;
    return os.str();
}

RunConfig parse_config_text(const std::string& json_text, const std::vector<std::string>& overrides) {
    json file_tree;
    try {
        file_tree = json::parse(json_text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    if (!file_tree.is_object()) throw ConfigError("config root must be a JSON object");
    json tree = default_tree();
    merge_checked(tree, file_tree, "");
    for (const auto& ov : overrides) apply_override(tree, ov);
    return from_tree(std::move(tree));
}

RunConfig parse_config(const std::string& path, const std::vector<std::string>& overrides) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str(), overrides);
}

SamplerConfig RunConfig::sampler_config(int max_new_tokens_override) const {
    SamplerConfig s;
    s.top_k = sampler.top_k;
    s.top_p = sampler.top_p;
    s.max_new_tokens = max_new_tokens_override > 0 ? max_new_tokens_override : sampler.max_new_tokens;
    s.temperature = sampler.temperature;
    return s;
}

TriggerSpec RunConfig::trigger_spec() const {
    TriggerSpec spec;
    spec.trigger_tokens = split_words(attack.trigger);
    spec.placement = attack.placement == "name-replacement" ? TriggerSpec::Placement::kNameReplacement
                                                            : TriggerSpec::Placement::kPrefix;
    spec.replaceable_names = attack.names;
    return spec;
}

ExperimentConfig RunConfig::experiment_config() const {
    ExperimentConfig e;
    e.condition = condition_from_string(training.condition);
    e.rho = training.poison.rate;
    e.trigger = trigger_spec();
    e.sel = attack.sel;
    e.gen_criteria.q_hi = attack.gen.q_hi;
    e.gen_criteria.q_lo = std::min(attack.gen.q_hi, attack.sel.q_lo);
    e.gen_criteria.n_select = attack.sel.n_select;
    e.gen.prefix_length = attack.gen.prefix_length;
    e.gen.iterations = attack.gen.iterations;
    e.gen.top_k_grad = attack.gen.top_k_grad;
    e.gen.proposals = attack.gen.proposals;
    e.gen_max_targets = attack.gen.max_targets;
    e.gen_max_target_tokens = attack.gen.max_target_tokens;
    e.assess_n_prompts = attack.assess.n_prompts;
    e.assess_n_samples = attack.assess.n_samples;
    e.assess_sampler = sampler_config(attack.assess.max_new_tokens);
    e.ppo.kl_coeff = training.ppo.kl_coeff;
    e.ppo.clip_epsilon = training.ppo.clip_epsilon;
    e.ppo.lr = training.ppo.lr;
    e.ppo.ppo_epochs = training.ppo.ppo_epochs;
    e.ppo.rollout_batch_size = training.ppo.rollout_batch_size;
    e.ppo.total_passes = training.ppo.total_passes;
    e.ppo.sampler = sampler_config(training.ppo.max_new_tokens);
    e.reward_name = training.reward_model;
    e.screening_enabled = training.screening.enabled;
    e.screening_threshold = training.screening.threshold;
    e.screening_models = training.screening.models;
    e.dataset_size = training.dataset_size;
    e.eval_n_probe = eval.n_probe;
    e.eval_n_samples = eval.n_samples;
    e.eval_sampler = sampler_config(eval.max_new_tokens);
    e.seed = seed;
    e.config_hash = config_hash;
    return e;
}

}  // namespace poisonlab
