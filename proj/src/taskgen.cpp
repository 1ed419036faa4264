// SPDX-License-Identifier: Apache-2.0
#include "mslora/taskgen.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include <fmt/format.h>

#include "mslora/errors.hpp"
#include "mslora/rng.hpp"

namespace mslora {

Matrix LabeledDataset::gather(std::span<const std::size_t> indices) const {
    Matrix out(features.rows(), indices.size());
    for (std::size_t j = 0; j < indices.size(); ++j) {
        for (std::size_t r = 0; r < features.rows(); ++r) {
            out(r, j) = features(r, indices[j]);
        }
    }
    return out;
}

std::vector<std::size_t> LabeledDataset::gather_labels(std::span<const std::size_t> indices) const {
    std::vector<std::size_t> out;
    out.reserve(indices.size());
    for (std::size_t i : indices) {
        out.push_back(labels.at(i));
    }
    return out;
}

namespace {

// Modified Gram-Schmidt on columns, run twice for orthogonality to working precision.
Matrix orthonormalize(Matrix m) {
    const std::size_t n = m.cols();
    for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t j = 0; j < n; ++j) {
            for (std::size_t k = 0; k < j; ++k) {
                double dot = 0.0;
                for (std::size_t r = 0; r < m.rows(); ++r) {
                    dot += m(r, j) * m(r, k);
                }
                for (std::size_t r = 0; r < m.rows(); ++r) {
                    m(r, j) -= dot * m(r, k);
                }
            }
            double norm = 0.0;
            for (std::size_t r = 0; r < m.rows(); ++r) {
                norm += m(r, j) * m(r, j);
            }
            norm = std::sqrt(norm);
            if (norm < 1e-12) {
                throw NumericError("degenerate matrix during orthogonalization");
            }
            for (std::size_t r = 0; r < m.rows(); ++r) {
                m(r, j) /= norm;
            }
        }
    }
    return m;
}

template <typename T>
T parse_number(std::string_view text, std::string_view what) {
    T value{};
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
    if (ec != std::errc{} || ptr != text.data() + text.size()) {
        throw FormatError(fmt::format("invalid {} '{}'", what, text));
    }
    return value;
}

} // namespace

SyntheticModality gen_modality(std::string modality_id, std::size_t dim, std::uint64_t seed) {
    if (dim < 2) {
        throw Error("modality dimension must be >= 2");
    }
    CounterRng rng(derive_seed(seed, 0x6d6f64ULL));
    SyntheticModality mod;
    mod.modality_id = std::move(modality_id);
    mod.seed = seed;
    mod.transform = orthonormalize(gaussian_matrix(rng, dim, dim, 1.0));
    mod.offset = gaussian_matrix(rng, dim, 1, 2.0);
    return mod;
}

void assign_split(LabeledDataset& data, std::uint64_t seed) {
    const std::size_t n = data.size();
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) {
        order[i] = i;
    }
    CounterRng rng(derive_seed(seed, 0x73706c6974ULL));
    for (std::size_t i = n; i > 1; --i) {
        std::swap(order[i - 1], order[rng.below(i)]);
    }
    const std::size_t n_train = (n * 4) / 5;
    data.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
    data.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
}

LabeledDataset gen_task(const SyntheticModality& modality, std::uint64_t task_seed, std::size_t class_count,
                        const TaskGenOptions& options) {
    if (class_count < 2) {
        throw Error("class count must be >= 2");
    }
    if (!(options.margin > 0.0)) {
        throw Error("margin must be positive");
    }
    const std::size_t dim = modality.transform.rows();
    CounterRng rng(derive_seed(modality.seed, task_seed));

    // Center spread scales with the margin so that acceptance depends only on (C, d).
    const double center_stddev = options.margin / std::sqrt(static_cast<double>(dim));
    std::vector<Matrix> centers;
    int attempts = 0;
    while (centers.size() < class_count) {
        if (++attempts > max_center_attempts) {
            throw Error(fmt::format("could not place {} centers {} apart in {} dimensions after {} attempts",
                                    class_count, options.margin, dim, max_center_attempts));
        }
        Matrix candidate = gaussian_matrix(rng, dim, 1, center_stddev);
        bool ok = true;
        for (const Matrix& c : centers) {
            double d2 = 0.0;
            for (std::size_t r = 0; r < dim; ++r) {
                const double diff = c(r, 0) - candidate(r, 0);
                d2 += diff * diff;
            }
            if (std::sqrt(d2) < options.margin) {
                ok = false;
                break;
            }
        }
        if (ok) {
            centers.push_back(std::move(candidate));
        }
    }

    LabeledDataset data;
    data.class_count = class_count;
    const std::size_t n = class_count * options.n_per_class;
    Matrix base(dim, n);
    data.labels.reserve(n);
    for (std::size_t cls = 0; cls < class_count; ++cls) {
        for (std::size_t k = 0; k < options.n_per_class; ++k) {
            const std::size_t col = cls * options.n_per_class + k;
            for (std::size_t r = 0; r < dim; ++r) {
                base(r, col) = centers[cls](r, 0) + rng.gaussian();
            }
            data.labels.push_back(cls);
        }
    }
    data.features = matmul(modality.transform, base);
    for (std::size_t r = 0; r < dim; ++r) {
        for (std::size_t c = 0; c < n; ++c) {
            data.features(r, c) += modality.offset(r, 0);
        }
    }
    assign_split(data, derive_seed(task_seed, modality.seed));
    return data;
}

bool is_synth_ref(std::string_view ref) {
    return ref.starts_with("synth:");
}

SynthRef parse_synth_ref(std::string_view ref) {
    if (!is_synth_ref(ref)) {
        throw FormatError(fmt::format("'{}' is not a synth: generator spec", ref));
    }
    std::vector<std::string_view> parts;
    std::string_view rest = ref.substr(6);
    while (true) {
        auto colon = rest.find(':');
        parts.push_back(rest.substr(0, colon));
        if (colon == std::string_view::npos) {
            break;
        }
        rest = rest.substr(colon + 1);
    }
    if (parts.size() != 3) {
        throw FormatError(fmt::format("expected synth:<modality-seed>:<task-seed>:<C>, got '{}'", ref));
    }
    SynthRef out;
    out.modality_seed = parse_number<std::uint64_t>(parts[0], "modality seed");
    out.task_seed = parse_number<std::uint64_t>(parts[1], "task seed");
    out.class_count = parse_number<std::size_t>(parts[2], "class count");
    return out;
}

LabeledDataset resolve_dataset(std::string_view ref, std::size_t dim, std::uint64_t split_seed,
                               const TaskGenOptions& options) {
    LabeledDataset data;
    if (is_synth_ref(ref)) {
        const SynthRef spec = parse_synth_ref(ref);
        const SyntheticModality mod = gen_modality(fmt::format("m{}", spec.modality_seed), dim, spec.modality_seed);
        data = gen_task(mod, spec.task_seed, spec.class_count, options);
    } else {
        data = read_dataset_csv(std::filesystem::path(ref), split_seed);
    }
    if (data.dim() != dim) {
        throw ShapeError(fmt::format("dataset '{}' has {} features, model width is {}", ref, data.dim(), dim));
    }
    return data;
}

void write_dataset_csv(const LabeledDataset& data, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) {
        throw Error(fmt::format("cannot write {}", path.string()));
    }
    out << "label";
    for (std::size_t r = 0; r < data.dim(); ++r) {
        out << ",f" << r;
    }
    out << '\n';
    for (std::size_t c = 0; c < data.size(); ++c) {
        out << data.labels[c];
        for (std::size_t r = 0; r < data.dim(); ++r) {
            out << ',' << fmt::format("{}", data.features(r, c));
        }
        out << '\n';
    }
    if (!out) {
        throw Error(fmt::format("write failed for {}", path.string()));
    }
}

LabeledDataset read_dataset_csv(const std::filesystem::path& path, std::uint64_t split_seed) {
    std::ifstream in(path);
    if (!in) {
        throw Error(fmt::format("cannot open dataset {}", path.string()));
    }
    std::string line;
    if (!std::getline(in, line)) {
        throw FormatError(fmt::format("{}: empty file", path.string()));
    }
    auto split = [](const std::string& s) {
        std::vector<std::string> cells;
        std::stringstream ss(s);
        std::string cell;
        while (std::getline(ss, cell, ',')) {
            cells.push_back(cell);
        }
        return cells;
    };
    const auto header = split(line);
    if (header.size() < 2 || header[0] != "label") {
        throw FormatError(fmt::format("{}: header must be label,f0,...", path.string()));
    }
    const std::size_t dim = header.size() - 1;
    for (std::size_t i = 0; i < dim; ++i) {
        if (header[i + 1] != fmt::format("f{}", i)) {
            throw FormatError(fmt::format("{}: unexpected header column '{}'", path.string(), header[i + 1]));
        }
    }
    std::vector<std::size_t> labels;
    std::vector<double> values;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        const auto cells = split(line);
        if (cells.size() != dim + 1) {
            throw FormatError(fmt::format("{}:{}: expected {} columns", path.string(), line_no, dim + 1));
        }
        labels.push_back(parse_number<std::size_t>(cells[0], "label"));
        for (std::size_t i = 1; i < cells.size(); ++i) {
            values.push_back(parse_number<double>(cells[i], "feature"));
        }
    }
    LabeledDataset data;
    const std::size_t n = labels.size();
    data.features = Matrix(dim, n);
    for (std::size_t c = 0; c < n; ++c) {
        for (std::size_t r = 0; r < dim; ++r) {
            data.features(r, c) = values[c * dim + r];
        }
    }
    data.labels = std::move(labels);
    data.class_count = n == 0 ? 0 : *std::max_element(data.labels.begin(), data.labels.end()) + 1;
    assign_split(data, split_seed);
    return data;
}

} // namespace mslora
