#include "dpolab/config.hpp"

#include <sstream>
#include <stdexcept>

#include "dpolab/rng.hpp"
#include "dpolab/util.hpp"

namespace dpolab {

namespace {

std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

struct Parser {
    std::string origin;
    int line_no = 0;

    [[noreturn]] void fail(const std::string& why) const {
        throw std::invalid_argument(origin + ":" + std::to_string(line_no) + ": " + why);
    }

    int to_int(const std::string& key, const std::string& v) const {
        try {
            std::size_t used = 0;
            int out = std::stoi(v, &used);
            if (used != v.size()) throw std::invalid_argument("");
            return out;
        } catch (const std::exception&) {
            fail(key + ": '" + v + "' is not an integer");
        }
    }

    std::uint64_t to_u64(const std::string& key, const std::string& v) const {
        try {
            std::size_t used = 0;
            std::uint64_t out = std::stoull(v, &used);
            if (used != v.size()) throw std::invalid_argument("");
            return out;
        } catch (const std::exception&) {
            fail(key + ": '" + v + "' is not an unsigned integer");
        }
    }

    double to_double(const std::string& key, const std::string& v) const {
        try {
            std::size_t used = 0;
            double out = std::stod(v, &used);
            if (used != v.size()) throw std::invalid_argument("");
            return out;
        } catch (const std::exception&) {
            fail(key + ": '" + v + "' is not a number");
        }
    }

    std::vector<double> to_doubles(const std::string& key, const std::string& v) const {
        std::vector<double> out;
        for (const std::string& item : split_list(v)) out.push_back(to_double(key, item));
        return out;
    }
};

}  // namespace

LabConfig parse_config_text(const std::string& text, const std::string& origin) {
    LabConfig cfg;
    cfg.pipeline.labeling_reward =
        RewardDescriptor{"length_biased_proxy", {{"gamma", 0.3}, {"length_cap", 48.0}}};
    // Schedule assembly: one beta grid shared by all iterations, a per-
    // iteration alpha list; combined after parsing.
    int iterations = 3;
    std::vector<double> alpha_schedule{0.0, 0.02, 0.02};
    std::vector<double> beta_grid{0.01, 0.03, 0.1};
    bool saw_version = false;

    Parser p{origin};
    std::istringstream in(text);
    std::string raw;
    std::string section;
    while (std::getline(in, raw)) {
        ++p.line_no;
        std::string line = raw;
        std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;

        if (line.front() == '[') {
            if (line.back() != ']') p.fail("unterminated section header '" + line + "'");
            section = trim(line.substr(1, line.size() - 2));
            if (section != "model" && section != "task" && section != "reward" &&
                section != "pipeline" && section != "collect" && section != "train" &&
                section != "pretrain" && section != "eval" && section != "run") {
                p.fail("unknown section [" + section + "]");
            }
            continue;
        }

        std::size_t eq = line.find('=');
        if (eq == std::string::npos) p.fail("expected key = value, got '" + line + "'");
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (key.empty()) p.fail("empty key");

        if (section.empty()) {
            if (key == "version") {
                if (p.to_int(key, value) != 1) p.fail("unsupported config version " + value);
                saw_version = true;
            } else {
                p.fail("unknown top-level key '" + key + "' (only 'version' may precede sections)");
            }
        } else if (section == "model") {
            if (key == "n_layers") cfg.model.n_layers = p.to_int(key, value);
            else if (key == "n_heads") cfg.model.n_heads = p.to_int(key, value);
            else if (key == "d_model") cfg.model.d_model = p.to_int(key, value);
            else if (key == "context") cfg.model.context = p.to_int(key, value);
            else p.fail("unknown key model." + key);
        } else if (section == "task") {
            if (key == "n_prompts") cfg.pipeline.n_prompts = p.to_int(key, value);
            else if (key == "n_eval_prompts") cfg.pipeline.n_eval_prompts = p.to_int(key, value);
            else if (key == "n_validation_prompts")
                cfg.pipeline.n_validation_prompts = p.to_int(key, value);
            else if (key == "prompt_len_min") cfg.pipeline.prompt_len_min = p.to_int(key, value);
            else if (key == "prompt_len_max") cfg.pipeline.prompt_len_max = p.to_int(key, value);
            else p.fail("unknown key task." + key);
        } else if (section == "reward") {
            if (key == "name") cfg.pipeline.labeling_reward.name = value;
            else if (key == "gamma")
                cfg.pipeline.labeling_reward.params["gamma"] = p.to_double(key, value);
            else if (key == "length_cap")
                cfg.pipeline.labeling_reward.params["length_cap"] = p.to_double(key, value);
            else p.fail("unknown key reward." + key);
        } else if (section == "pipeline") {
            if (key == "iterations") iterations = p.to_int(key, value);
            else if (key == "alpha_schedule") alpha_schedule = p.to_doubles(key, value);
            else if (key == "beta_grid") beta_grid = p.to_doubles(key, value);
            else if (key == "external_d1") cfg.pipeline.external_d1 = value;
            else p.fail("unknown key pipeline." + key);
        } else if (section == "collect") {
            if (key == "samples_per_prompt")
                cfg.pipeline.collect.samples_per_prompt = p.to_int(key, value);
            else if (key == "pairs_per_prompt")
                cfg.pipeline.collect.pairs_per_prompt = p.to_int(key, value);
            else if (key == "max_new_tokens")
                cfg.pipeline.collect.max_new_tokens = p.to_int(key, value);
            else if (key == "temperature")
                cfg.pipeline.collect.temperature = p.to_double(key, value);
            else p.fail("unknown key collect." + key);
        } else if (section == "train") {
            if (key == "lr") cfg.pipeline.lr = p.to_double(key, value);
            else if (key == "epochs") cfg.pipeline.epochs = p.to_int(key, value);
            else if (key == "batch_size") cfg.pipeline.batch_size = p.to_int(key, value);
            else p.fail("unknown key train." + key);
        } else if (section == "pretrain") {
            if (key == "steps") cfg.pretrain.steps = p.to_int(key, value);
            else if (key == "batch") cfg.pretrain.batch = p.to_int(key, value);
            else if (key == "lr") cfg.pretrain.lr = p.to_double(key, value);
            else if (key == "verbose_frac") {
                cfg.pretrain.verbose_frac = p.to_double(key, value);
                if (cfg.pretrain.verbose_frac < 0.0 || cfg.pretrain.verbose_frac > 1.0) {
                    p.fail("verbose_frac must be in [0, 1]");
                }
            }
            else if (key == "noise_frac") {
                cfg.pretrain.noise_frac = p.to_double(key, value);
                if (cfg.pretrain.noise_frac < 0.0 || cfg.pretrain.noise_frac > 1.0) {
                    p.fail("noise_frac must be in [0, 1]");
                }
            }
            else if (key == "target_gold") {
                cfg.pretrain.target_gold = p.to_double(key, value);
                if (cfg.pretrain.target_gold < 0.0 || cfg.pretrain.target_gold > 1.0) {
                    p.fail("target_gold must be in [0, 1]");
                }
            }
            else if (key == "probe_every") cfg.pretrain.probe_every = p.to_int(key, value);
            else if (key == "probe_prompts") cfg.pretrain.probe_prompts = p.to_int(key, value);
            else p.fail("unknown key pretrain." + key);
        } else if (section == "eval") {
            if (key == "modes") cfg.pipeline.eval_modes = split_list(value);
            else p.fail("unknown key eval." + key);
        } else if (section == "run") {
            if (key == "seed") cfg.pipeline.seed = p.to_u64(key, value);
            else if (key == "out_dir") cfg.pipeline.out_dir = value;
            else if (key == "base_checkpoint") cfg.base_checkpoint = value;
            else p.fail("unknown key run." + key);
        }
    }
    if (!saw_version) {
        p.line_no = 0;
        p.fail("missing required top-level key 'version'");
    }

    if (iterations < 1) {
        throw std::invalid_argument(origin + ": pipeline.iterations must be >= 1");
    }
    if (static_cast<int>(alpha_schedule.size()) != iterations) {
        throw std::invalid_argument(
            origin + ": pipeline.alpha_schedule has " + std::to_string(alpha_schedule.size()) +
            " entries but pipeline.iterations is " + std::to_string(iterations));
    }
    cfg.pipeline.schedule.clear();
    for (int i = 0; i < iterations; ++i) {
        cfg.pipeline.schedule.push_back(
            IterationSpec{alpha_schedule[static_cast<std::size_t>(i)], beta_grid});
    }
    // Pretraining draws from the same seed family as everything else.
    cfg.pretrain.seed = derive_seed(cfg.pipeline.seed, 10);
    cfg.model.validate();
    return cfg;
}

LabConfig parse_config_file(const std::string& path) {
    return parse_config_text(read_file(path), path);
}

std::string default_config_text() {
    return "# Length-regularized iterative DPO lab: all knobs in one place.\n"
           "version = 1\n"
           "\n"
           "[model]\n"
           "n_layers = 2\n"
           "n_heads = 2\n"
           "d_model = 32\n"
           "context = 64\n"
           "\n"
           "[task]\n"
           "n_prompts = 2000\n"
           "n_eval_prompts = 200\n"
           "n_validation_prompts = 64\n"
           "prompt_len_min = 3\n"
           "prompt_len_max = 6\n"
           "\n"
           "[reward]\n"
           "name = length_biased_proxy\n"
           "gamma = 0.3\n"
           "length_cap = 48\n"
           "\n"
           "[pipeline]\n"
           "iterations = 3\n"
           "alpha_schedule = 0, 0.02, 0.02\n"
           "beta_grid = 0.01, 0.03, 0.1\n"
           "external_d1 =\n"
           "\n"
           "[collect]\n"
           "samples_per_prompt = 2\n"
           "pairs_per_prompt = 1\n"
           "max_new_tokens = 48\n"
           "temperature = 1.0\n"
           "\n"
           "[train]\n"
           "lr = 3e-4\n"
           "epochs = 1\n"
           "batch_size = 16\n"
           "\n"
           "[pretrain]\n"
           "steps = 600\n"
           "batch = 16\n"
           "lr = 1e-3\n"
           "verbose_frac = 0.1\n"
           "noise_frac = 0.1\n"
           "\n"
           "[eval]\n"
           "modes = sample, bo8, bo64\n"
           "\n"
           "[run]\n"
           "seed = 1\n"
           "out_dir = runs/default\n"
           "base_checkpoint = runs/base.ckpt\n";
}

}  // namespace dpolab
