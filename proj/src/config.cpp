// SPDX-License-Identifier: Apache-2.0
#include "mslora/config.hpp"

#include <charconv>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include <fmt/format.h>

#include "mslora/errors.hpp"

namespace mslora {

namespace {

std::string_view trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string_view::npos) {
        return {};
    }
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

struct Entry {
    std::string value;
    std::size_t line = 0;
};

struct Section {
    std::string name;
    std::size_t line = 0;
    std::map<std::string, Entry> entries;
};

class SectionReader {
public:
    SectionReader(const Section& section, std::set<std::string> allowed) : section_(section) {
        for (const auto& [key, entry] : section.entries) {
            if (!allowed.contains(key)) {
                throw ConfigError(fmt::format("unknown key '{}' in section [{}]", key, section.name), entry.line);
            }
        }
    }

    std::optional<Entry> raw(const std::string& key) const {
        auto it = section_.entries.find(key);
        if (it == section_.entries.end()) {
            return std::nullopt;
        }
        return it->second;
    }

    template <typename T>
    void number(const std::string& key, T& out) const {
        if (auto e = raw(key)) {
            out = parse<T>(*e, key);
        }
    }

    void text(const std::string& key, std::string& out) const {
        if (auto e = raw(key)) {
            if (e->value.empty()) {
                throw ConfigError(fmt::format("'{}' must not be empty", key), e->line);
            }
            out = e->value;
        }
    }

    void boolean(const std::string& key, bool& out) const {
        if (auto e = raw(key)) {
            if (e->value == "true") {
                out = true;
            } else if (e->value == "false") {
                out = false;
            } else {
                throw ConfigError(fmt::format("'{}' must be true or false, got '{}'", key, e->value), e->line);
            }
        }
    }

    template <typename Fn>
    void custom(const std::string& key, Fn&& fn) const {
        if (auto e = raw(key)) {
            try {
                fn(e->value);
            } catch (const ConfigError& err) {
                if (err.line() != 0) {
                    throw;
                }
                throw ConfigError(err.what(), e->line);
            } catch (const Error& err) {
                throw ConfigError(err.what(), e->line);
            }
        }
    }

    template <typename T>
    static T parse(const Entry& e, std::string_view key) {
        T value{};
        const char* begin = e.value.data();
        const char* end = begin + e.value.size();
        auto [ptr, ec] = std::from_chars(begin, end, value);
        if (ec != std::errc{} || ptr != end) {
            throw ConfigError(fmt::format("invalid number '{}' for '{}'", e.value, key), e.line);
        }
        return value;
    }

private:
    const Section& section_;
};

std::vector<Section> split_sections(std::string_view text) {
    std::vector<Section> sections;
    std::set<std::string> seen;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const auto nl = text.find('\n', pos);
        const std::string_view raw_line = text.substr(pos, nl == std::string_view::npos ? text.size() - pos : nl - pos);
        pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
        ++line_no;
        const std::string_view line = trim(raw_line);
        if (line.empty() || line.front() == '#' || line.front() == ';') {
            continue;
        }
        if (line.front() == '[') {
            if (line.back() != ']' || line.size() < 3) {
                throw ConfigError(fmt::format("malformed section header '{}'", line), line_no);
            }
            std::string name(trim(line.substr(1, line.size() - 2)));
            if (!seen.insert(name).second) {
                throw ConfigError(fmt::format("duplicate section [{}]", name), line_no);
            }
            sections.push_back(Section{std::move(name), line_no, {}});
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string_view::npos) {
            throw ConfigError(fmt::format("expected 'key = value', got '{}'", line), line_no);
        }
        if (sections.empty()) {
            throw ConfigError("key outside of any section", line_no);
        }
        std::string key(trim(line.substr(0, eq)));
        std::string value(trim(line.substr(eq + 1)));
        if (key.empty()) {
            throw ConfigError("empty key", line_no);
        }
        auto& entries = sections.back().entries;
        if (entries.contains(key)) {
            throw ConfigError(fmt::format("duplicate key '{}' in [{}]", key, sections.back().name), line_no);
        }
        entries.emplace(std::move(key), Entry{std::move(value), line_no});
    }
    return sections;
}

} // namespace

void ExperimentConfig::validate() const {
    run.validate();
    if (tasks.empty()) {
        throw ConfigError("the sequence has no tasks");
    }
    validate_sequence(tasks);
}

ExperimentConfig parse_config(std::string_view text) {
    ExperimentConfig cfg;
    const auto sections = split_sections(text);

    // [sequence] defaults must be known before the task sections are read.
    for (const Section& s : sections) {
        if (s.name == "sequence") {
            SectionReader r(s, {"steps", "batch"});
            r.number("steps", cfg.default_steps);
            r.number("batch", cfg.default_batch);
        }
    }

    for (const Section& s : sections) {
        if (s.name == "model") {
            SectionReader r(s, {"depth", "width", "placement"});
            r.number("depth", cfg.run.model.depth);
            r.number("width", cfg.run.model.width);
            r.custom("placement", [&](const std::string& v) { cfg.run.model.placement = Placement::parse(v); });
        } else if (s.name == "lora") {
            SectionReader r(s, {"rank", "alpha"});
            r.number("rank", cfg.run.rank);
            r.number("alpha", cfg.run.lora_alpha);
        } else if (s.name == "loss") {
            SectionReader r(s, {"alpha", "beta", "cr.reduce", "similarity.normalize"});
            r.number("alpha", cfg.run.weights.alpha);
            r.number("beta", cfg.run.weights.beta);
            r.custom("cr.reduce", [&](const std::string& v) { cfg.run.regularizers.reduce = parse_cr_reduce(v); });
            r.boolean("similarity.normalize", cfg.run.regularizers.normalize_similarity);
        } else if (s.name == "optimizer") {
            SectionReader r(s, {"lr", "betas", "epsilon", "warmup_ratio", "weight_decay"});
            r.number("lr", cfg.run.learning_rate);
            r.number("epsilon", cfg.run.optimizer.epsilon);
            r.number("warmup_ratio", cfg.run.warmup_ratio);
            r.number("weight_decay", cfg.run.optimizer.weight_decay);
            if (auto e = r.raw("betas")) {
                const auto comma = e->value.find(',');
                if (comma == std::string::npos) {
                    throw ConfigError("betas must be 'beta1, beta2'", e->line);
                }
                cfg.run.optimizer.beta1 =
                    SectionReader::parse<double>(Entry{std::string(trim(e->value.substr(0, comma))), e->line}, "betas");
                cfg.run.optimizer.beta2 =
                    SectionReader::parse<double>(Entry{std::string(trim(e->value.substr(comma + 1))), e->line}, "betas");
            }
        } else if (s.name == "runtime") {
            SectionReader r(s, {"seed", "determinism", "output"});
            r.number("seed", cfg.run.seed);
            r.boolean("determinism", cfg.run.determinism);
            if (auto e = r.raw("output")) {
                cfg.output_dir = e->value;
            }
        } else if (s.name == "mask") {
            SectionReader r(s, {"policy"});
            r.custom("policy", [&](const std::string& v) { cfg.run.mask_policy = parse_mask_policy(v); });
        } else if (s.name == "sequence") {
            continue;
        } else if (s.name.starts_with("task.")) {
            SectionReader r(s, {"modality", "data", "classes", "steps", "batch"});
            TaskSpec task;
            task.task_id = s.name.substr(5);
            task.steps = cfg.default_steps;
            task.batch_size = cfg.default_batch;
            r.text("modality", task.modality_id);
            r.text("data", task.dataset_ref);
            r.number("classes", task.class_count);
            r.number("steps", task.steps);
            r.number("batch", task.batch_size);
            try {
                task.validate();
            } catch (const Error& e) {
                throw ConfigError(e.what(), s.line);
            }
            cfg.tasks.push_back(std::move(task));
        } else {
            throw ConfigError(fmt::format("unknown section [{}]", s.name), s.line);
        }
    }
    cfg.validate();
    return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError(fmt::format("cannot open config file {}", path.string()));
    }
    std::stringstream buffer;
    buffer << in.rdbuf();
    try {
        return parse_config(buffer.str());
    } catch (const ConfigError& e) {
        throw ConfigError(fmt::format("{}: {}", path.string(), e.what()), e.line());
    }
}

std::string render_config(const ExperimentConfig& c) {
    const RunConfig& r = c.run;
    std::string out;
    out += fmt::format("[model]\ndepth = {}\nwidth = {}\nplacement = {}\n\n", r.model.depth, r.model.width,
                       r.model.placement.to_string());
    out += fmt::format("[lora]\nrank = {}\nalpha = {}\n\n", r.rank, r.lora_alpha);
    out += fmt::format("[loss]\nalpha = {}\nbeta = {}\ncr.reduce = {}\nsimilarity.normalize = {}\n\n", r.weights.alpha,
                       r.weights.beta, to_string(r.regularizers.reduce), r.regularizers.normalize_similarity);
    out += fmt::format("[optimizer]\nlr = {}\nbetas = {}, {}\nepsilon = {}\nwarmup_ratio = {}\nweight_decay = {}\n\n",
                       r.learning_rate, r.optimizer.beta1, r.optimizer.beta2, r.optimizer.epsilon, r.warmup_ratio,
                       r.optimizer.weight_decay);
    out += fmt::format("[runtime]\nseed = {}\ndeterminism = {}\noutput = {}\n\n", r.seed, r.determinism,
                       c.output_dir.string());
    out += fmt::format("[mask]\npolicy = {}\n\n", to_string(r.mask_policy));
    out += fmt::format("[sequence]\nsteps = {}\nbatch = {}\n", c.default_steps, c.default_batch);
    for (const TaskSpec& t : c.tasks) {
        out += fmt::format("\n[task.{}]\nmodality = {}\ndata = {}\nclasses = {}\nsteps = {}\nbatch = {}\n", t.task_id,
                           t.modality_id, t.dataset_ref, t.class_count, t.steps, t.batch_size);
    }
    return out;
}

} // namespace mslora
