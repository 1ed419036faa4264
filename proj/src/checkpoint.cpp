// SPDX-License-Identifier: Apache-2.0
#include "mslora/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <limits>

#include <fmt/format.h>
#include <json.hpp>

#include "mslora/errors.hpp"

namespace mslora {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::array<char, 4> magic = {'M', 'S', 'L', 'R'};

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) {
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xffU));
    }
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xffU));
    }
}

std::uint32_t get_u32(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::uint64_t get_u64(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) {
        v = (v << 8) | p[i];
    }
    return v;
}

void write_file_atomic(const fs::path& path, const std::string& bytes) {
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw Error(fmt::format("cannot write {}", tmp.string()));
        }
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) {
            throw Error(fmt::format("write failed for {}", tmp.string()));
        }
    }
    fs::rename(tmp, path);
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw FormatError(fmt::format("cannot open {}", path.string()));
    }
    return std::string(std::istreambuf_iterator<char>(in), {});
}

std::string hex64(std::uint64_t v) {
    return fmt::format("{:016x}", v);
}

std::uint64_t parse_hex64(const std::string& s) {
    std::size_t pos = 0;
    const std::uint64_t v = std::stoull(s, &pos, 16);
    if (pos != s.size()) {
        throw FormatError(fmt::format("invalid hash '{}'", s));
    }
    return v;
}

} // namespace

void write_matrix_file(const Matrix& m, const fs::path& path) {
    constexpr auto u32_max = std::numeric_limits<std::uint32_t>::max();
    if (m.rows() > u32_max || m.cols() > u32_max) {
        throw FormatError(fmt::format("matrix {} too large for the file format", shape_str(m)));
    }
    std::string bytes(magic.begin(), magic.end());
    put_u32(bytes, matrix_file_version);
    put_u32(bytes, static_cast<std::uint32_t>(m.rows()));
    put_u32(bytes, static_cast<std::uint32_t>(m.cols()));
    bytes.reserve(bytes.size() + 8 * m.size());
    for (double v : m.data()) {
        put_u64(bytes, std::bit_cast<std::uint64_t>(v));
    }
    write_file_atomic(path, bytes);
}

Matrix read_matrix_file(const fs::path& path) {
    const std::string bytes = read_file(path);
    if (bytes.size() < 16) {
        throw FormatError(fmt::format("{}: truncated header", path.string()));
    }
    if (std::memcmp(bytes.data(), magic.data(), magic.size()) != 0) {
        throw FormatError(fmt::format("{}: bad magic (not an MSLR matrix file)", path.string()));
    }
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    const std::uint32_t version = get_u32(p + 4);
    if (version != matrix_file_version) {
        throw FormatError(fmt::format("{}: unsupported version {} (expected {})", path.string(), version,
                                      matrix_file_version));
    }
    const std::uint64_t rows = get_u32(p + 8);
    const std::uint64_t cols = get_u32(p + 12);
    const std::uint64_t count = rows * cols;
    if ((bytes.size() - 16) / 8 < count || bytes.size() - 16 != count * 8) {
        throw FormatError(fmt::format("{}: dimensions {}x{} do not match payload of {} bytes", path.string(), rows,
                                      cols, bytes.size() - 16));
    }
    Matrix m(rows, cols);
    for (std::uint64_t i = 0; i < count; ++i) {
        m.data()[i] = std::bit_cast<double>(get_u64(p + 16 + 8 * i));
    }
    return m;
}

void save_checkpoint(const ToyModel& model, const std::vector<StabilitySnapshot>& snapshots, const AdamW* optimizer,
                     const fs::path& dir) {
    const fs::path staging = dir.string() + ".staging";
    fs::remove_all(staging);
    fs::create_directories(staging);

    auto store = [&](const Matrix& m, const std::string& name) {
        write_matrix_file(m, staging / name);
        return name;
    };

    json manifest;
    manifest["schema_version"] = manifest_schema_version;
    manifest["width"] = model.width();
    manifest["depth"] = model.depth();
    manifest["placement"] = model.placement().to_string();
    manifest["placed_layers"] = model.placed_layers();

    json layers = json::array();
    for (std::size_t i = 0; i < model.depth(); ++i) {
        const BranchStack& stack = model.layer(i);
        json layer;
        layer["index"] = i;
        layer["weight"] = store(stack.weight(), fmt::format("layer{}.weight.bin", i));
        layer["bias"] = store(stack.bias(), fmt::format("layer{}.bias.bin", i));
        layer["mask"] = stack.mask();
        json branches = json::array();
        for (std::size_t j = 0; j < stack.branches().size(); ++j) {
            const LoraBranch& b = stack.branches()[j];
            branches.push_back({
                {"task_id", b.task_id},
                {"modality_id", b.modality_id},
                {"rank", b.rank},
                {"scale", b.scale},
                {"frozen", b.frozen},
                {"a", store(b.a, fmt::format("layer{}.branch{}.a.bin", i, j))},
                {"b", store(b.b, fmt::format("layer{}.branch{}.b.bin", i, j))},
            });
        }
        layer["branches"] = std::move(branches);
        layers.push_back(std::move(layer));
    }
    manifest["layers"] = std::move(layers);

    json heads = json::array();
    for (std::size_t k = 0; k < model.heads().size(); ++k) {
        const TaskHead& h = model.heads()[k];
        heads.push_back({
            {"task_id", h.task_id},
            {"modality_id", h.modality_id},
            {"class_count", h.class_count},
            {"dataset_ref", h.dataset_ref},
            {"split_seed", hex64(h.split_seed)},
            {"frozen", h.frozen},
            {"weight", store(h.weight, fmt::format("head{}.weight.bin", k))},
            {"bias", store(h.bias, fmt::format("head{}.bias.bin", k))},
        });
    }
    manifest["heads"] = std::move(heads);

    json snaps = json::array();
    for (std::size_t k = 0; k < snapshots.size(); ++k) {
        const StabilitySnapshot& s = snapshots[k];
        snaps.push_back({
            {"task_id", s.task_id},
            {"input_hash", hex64(s.input_hash)},
            {"mask_policy", std::string(to_string(s.policy))},
            {"captured_after", s.captured_after},
            {"accuracy", s.accuracy},
            {"logits", store(s.logits, fmt::format("snapshot{}.logits.bin", k))},
            {"inputs", store(s.inputs, fmt::format("snapshot{}.inputs.bin", k))},
            {"labels", s.labels},
        });
    }
    manifest["snapshots"] = std::move(snaps);

    if (optimizer != nullptr) {
        json opt;
        opt["beta1"] = optimizer->params().beta1;
        opt["beta2"] = optimizer->params().beta2;
        opt["epsilon"] = optimizer->params().epsilon;
        opt["weight_decay"] = optimizer->params().weight_decay;
        opt["step"] = optimizer->step_count();
        json entries = json::array();
        std::size_t n = 0;
        for (const auto& [name, moments] : optimizer->state()) {
            entries.push_back({
                {"name", name},
                {"first", store(moments.first, fmt::format("opt{}.first.bin", n))},
                {"second", store(moments.second, fmt::format("opt{}.second.bin", n))},
            });
            ++n;
        }
        opt["state"] = std::move(entries);
        manifest["optimizer"] = std::move(opt);
    } else {
        manifest["optimizer"] = nullptr;
    }

    write_file_atomic(staging / "manifest.json", manifest.dump(2) + "\n");

    const fs::path previous = dir.string() + ".previous";
    fs::remove_all(previous);
    if (fs::exists(dir)) {
        fs::rename(dir, previous);
    }
    fs::rename(staging, dir);
    fs::remove_all(previous);
}

Checkpoint load_checkpoint(const fs::path& dir) {
    const fs::path manifest_path = dir / "manifest.json";
    json manifest;
    try {
        manifest = json::parse(read_file(manifest_path));
    } catch (const json::parse_error& e) {
        throw FormatError(fmt::format("{}: {}", manifest_path.string(), e.what()));
    }
    try {
        const int schema = manifest.at("schema_version").get<int>();
        if (schema != manifest_schema_version) {
            throw FormatError(fmt::format("{}: schema version {} not supported (expected {})", manifest_path.string(),
                                          schema, manifest_schema_version));
        }
        auto load = [&](const json& name) { return read_matrix_file(dir / name.get<std::string>()); };

        const auto width = manifest.at("width").get<std::size_t>();
        const auto placement = Placement::parse(manifest.at("placement").get<std::string>());
        const auto placed = manifest.at("placed_layers").get<std::vector<std::size_t>>();

        std::vector<BranchStack> layers;
        for (const json& layer : manifest.at("layers")) {
            BranchStack stack(load(layer.at("weight")), load(layer.at("bias")));
            const auto mask = layer.at("mask").get<std::vector<int>>();
            const json& branches = layer.at("branches");
            if (mask.size() != branches.size()) {
                throw FormatError("mask length does not match branch count");
            }
            for (std::size_t j = 0; j < branches.size(); ++j) {
                const json& b = branches[j];
                LoraBranch branch;
                branch.task_id = b.at("task_id").get<std::string>();
                branch.modality_id = b.at("modality_id").get<std::string>();
                branch.rank = b.at("rank").get<std::size_t>();
                branch.scale = b.at("scale").get<double>();
                branch.frozen = b.at("frozen").get<bool>();
                branch.a = load(b.at("a"));
                branch.b = load(b.at("b"));
                stack.restore_branch(std::move(branch), mask[j] != 0);
            }
            layers.push_back(std::move(stack));
        }
        if (layers.size() != manifest.at("depth").get<std::size_t>()) {
            throw FormatError("layer count does not match manifest depth");
        }

        std::vector<TaskHead> heads;
        for (const json& h : manifest.at("heads")) {
            TaskHead head;
            head.task_id = h.at("task_id").get<std::string>();
            head.modality_id = h.at("modality_id").get<std::string>();
            head.class_count = h.at("class_count").get<std::size_t>();
            head.dataset_ref = h.at("dataset_ref").get<std::string>();
            head.split_seed = parse_hex64(h.at("split_seed").get<std::string>());
            head.frozen = h.at("frozen").get<bool>();
            head.weight = load(h.at("weight"));
            head.bias = load(h.at("bias"));
            heads.push_back(std::move(head));
        }

        Checkpoint cp;
        cp.model = ToyModel(width, std::move(layers), placed, placement, std::move(heads));

        for (const json& s : manifest.at("snapshots")) {
            StabilitySnapshot snap;
            snap.task_id = s.at("task_id").get<std::string>();
            snap.input_hash = parse_hex64(s.at("input_hash").get<std::string>());
            snap.policy = parse_mask_policy(s.at("mask_policy").get<std::string>());
            snap.captured_after = s.at("captured_after").get<std::size_t>();
            snap.accuracy = s.at("accuracy").get<double>();
            snap.logits = load(s.at("logits"));
            snap.inputs = load(s.at("inputs"));
            snap.labels = s.at("labels").get<std::vector<std::size_t>>();
            if (content_hash(snap.inputs) != snap.input_hash) {
                throw FormatError(fmt::format("snapshot for '{}' does not match its recorded input hash", snap.task_id));
            }
            cp.snapshots.push_back(std::move(snap));
        }

        const json& opt = manifest.at("optimizer");
        if (!opt.is_null()) {
            AdamWParams params;
            params.beta1 = opt.at("beta1").get<double>();
            params.beta2 = opt.at("beta2").get<double>();
            params.epsilon = opt.at("epsilon").get<double>();
            params.weight_decay = opt.at("weight_decay").get<double>();
            std::map<std::string, Moments> state;
            for (const json& e : opt.at("state")) {
                state[e.at("name").get<std::string>()] = Moments{load(e.at("first")), load(e.at("second"))};
            }
            AdamW adam(params);
            adam.restore(std::move(state), opt.at("step").get<std::uint64_t>());
            cp.optimizer = std::move(adam);
        }
        return cp;
    } catch (const json::exception& e) {
        throw FormatError(fmt::format("{}: {}", manifest_path.string(), e.what()));
    }
}

} // namespace mslora
