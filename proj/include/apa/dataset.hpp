// Rating-style data ingestion, label binarization, deterministic splitting,
// and a synthetic desk-scale generator with planted cluster/label structure.
#pragma once

#include <apa/numerics.hpp>

#include <json.hpp>

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <tuple>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace apa {

using SampleId = std::int64_t;

/// One training/validation/test example with a binary like/dislike label.
struct InstructionSample {
    SampleId id = 0;
    Vector features;
    int label = 0;  // 1 = like, 0 = dislike
};

struct Dataset {
    std::vector<InstructionSample> samples;
    std::size_t dim = 0;

    std::size_t size() const { return samples.size(); }
    bool empty() const { return samples.empty(); }
};

struct SplitSpec {
    std::size_t train_size = 0;
    std::size_t valid_size = 0;
    std::size_t test_size = 0;
    std::uint64_t seed = 0;
};

enum class DataFormat { Jsonl, Csv };

/// rating strictly greater than threshold -> like. The boundary value maps to
/// dislike (ratings "higher than"/"exceeding" the threshold count as like).
inline int binarize(double rating, double threshold) {
    if (!std::isfinite(rating)) throw std::invalid_argument("binarize: non-finite rating");
    return rating > threshold ? 1 : 0;
}

inline std::unordered_map<SampleId, std::size_t> build_index(const Dataset& d) {
    std::unordered_map<SampleId, std::size_t> idx;
    idx.reserve(d.size());
    for (std::size_t i = 0; i < d.size(); ++i) idx.emplace(d.samples[i].id, i);
    return idx;
}

namespace detail {

inline void validate_and_append(Dataset& out, InstructionSample s,
                                std::unordered_set<SampleId>& seen,
                                const std::string& where) {
    if (s.features.empty()) throw std::runtime_error(where + ": record has no features");
    for (double f : s.features) {
        if (!std::isfinite(f)) throw std::runtime_error(where + ": non-finite feature value");
    }
    if (s.label != 0 && s.label != 1) throw std::runtime_error(where + ": label must be 0 or 1");
    if (out.dim == 0) {
        out.dim = s.features.size();
    } else if (s.features.size() != out.dim) {
        throw std::runtime_error(where + ": inconsistent feature arity " +
                                 std::to_string(s.features.size()) + " (expected " +
                                 std::to_string(out.dim) + ")");
    }
    if (!seen.insert(s.id).second) {
        throw std::runtime_error(where + ": duplicate sample id " + std::to_string(s.id));
    }
    out.samples.push_back(std::move(s));
}

inline Dataset load_jsonl(const std::string& path, double rating_threshold) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_samples: cannot open " + path);
    Dataset out;
    std::unordered_set<SampleId> seen;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const std::string where = path + ":" + std::to_string(lineno);
        nlohmann::json rec;
        try {
            rec = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw std::runtime_error(where + ": malformed record: " + e.what());
        }
        if (!rec.is_object() || !rec.contains("id") || !rec.contains("features")) {
            throw std::runtime_error(where + ": record needs id and features");
        }
        InstructionSample s;
        try {
            s.id = rec.at("id").get<SampleId>();
            s.features = rec.at("features").get<Vector>();
            if (rec.contains("label")) {
                s.label = rec.at("label").get<int>();
            } else if (rec.contains("rating")) {
                s.label = binarize(rec.at("rating").get<double>(), rating_threshold);
            } else {
                throw std::runtime_error("record needs rating or label");
            }
        } catch (const nlohmann::json::exception& e) {
            throw std::runtime_error(where + ": malformed record: " + e.what());
        } catch (const std::runtime_error& e) {
            throw std::runtime_error(where + ": " + e.what());
        }
        validate_and_append(out, std::move(s), seen, where);
    }
    if (out.empty()) throw std::runtime_error("load_samples: no samples in " + path);
    return out;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    std::stringstream ss(line);
    while (std::getline(ss, cur, ',')) fields.push_back(cur);
    if (!line.empty() && line.back() == ',') fields.push_back("");
    return fields;
}

inline Dataset load_csv(const std::string& path, double rating_threshold) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_samples: cannot open " + path);
    Dataset out;
    std::unordered_set<SampleId> seen;
    std::string line;
    std::size_t lineno = 0;

    if (!std::getline(in, line)) throw std::runtime_error("load_samples: no samples in " + path);
    ++lineno;
    auto header = split_csv_line(line);
    if (header.size() < 3 || header[0] != "id" ||
        (header[1] != "rating" && header[1] != "label")) {
        throw std::runtime_error(path + ":1: expected header id,rating,f0,... or id,label,f0,...");
    }
    const bool is_rating = header[1] == "rating";
    const std::size_t arity = header.size() - 2;

    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const std::string where = path + ":" + std::to_string(lineno);
        auto fields = split_csv_line(line);
        if (fields.size() != header.size()) {
            throw std::runtime_error(where + ": expected " + std::to_string(header.size()) +
                                     " fields, got " + std::to_string(fields.size()));
        }
        InstructionSample s;
        try {
            s.id = std::stoll(fields[0]);
            const double v = std::stod(fields[1]);
            s.label = is_rating ? binarize(v, rating_threshold) : static_cast<int>(v);
            s.features.reserve(arity);
            for (std::size_t i = 2; i < fields.size(); ++i) {
                s.features.push_back(std::stod(fields[i]));
            }
        } catch (const std::invalid_argument&) {
            throw std::runtime_error(where + ": malformed numeric field");
        } catch (const std::out_of_range&) {
            throw std::runtime_error(where + ": numeric field out of range");
        }
        validate_and_append(out, std::move(s), seen, where);
    }
    if (out.empty()) throw std::runtime_error("load_samples: no samples in " + path);
    return out;
}

} // namespace detail

/// Parse a dataset; ratings are binarized with rating_threshold, records that
/// already carry a 0/1 label are taken as-is.
inline Dataset load_samples(const std::string& path, DataFormat format,
                            double rating_threshold = 0.5) {
    return format == DataFormat::Jsonl ? detail::load_jsonl(path, rating_threshold)
                                       : detail::load_csv(path, rating_threshold);
}

inline void save_jsonl(const Dataset& d, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("save_jsonl: cannot open " + path);
    for (const auto& s : d.samples) {
        nlohmann::json rec;
        rec["id"] = s.id;
        rec["features"] = s.features;
        rec["label"] = s.label;
        out << rec.dump() << "\n";
    }
}

/// Deterministic shuffle by seed, then contiguous slicing into
/// (train, valid, test) with disjoint id sets.
inline std::tuple<Dataset, Dataset, Dataset> split(const Dataset& d, const SplitSpec& spec) {
    const std::size_t want = spec.train_size + spec.valid_size + spec.test_size;
    if (want > d.size()) {
        throw std::invalid_argument("split: requested " + std::to_string(want) +
                                    " samples from a dataset of " + std::to_string(d.size()));
    }
    std::vector<std::size_t> order(d.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    SeededRng rng(spec.seed);
    for (std::size_t i = order.size(); i > 1; --i) {
        std::swap(order[i - 1], order[rng.next_below(i)]);
    }
    auto take = [&](std::size_t begin, std::size_t count) {
        Dataset part;
        part.dim = d.dim;
        part.samples.reserve(count);
        for (std::size_t i = begin; i < begin + count; ++i) {
            part.samples.push_back(d.samples[order[i]]);
        }
        return part;
    };
    return {take(0, spec.train_size), take(spec.train_size, spec.valid_size),
            take(spec.train_size + spec.valid_size, spec.test_size)};
}

/// Planted structure behind synth_generate, exposed for experiments and tests.
struct SynthModel {
    std::vector<Vector> cluster_centers;
    Vector plant_direction;    // unit vector; the label margin is direction . x + bias
    Vector cluster_bias;
    std::vector<int> cluster_of;
};

inline Dataset synth_generate_detailed(std::size_t n, std::size_t dim, std::size_t k_latent,
                                       double noise, std::uint64_t seed, SynthModel* model_out) {
    if (n == 0 || dim == 0 || k_latent == 0) {
        throw std::invalid_argument("synth_generate: n, dim, k_latent must be > 0");
    }
    if (noise < 0.0 || noise > 1.0) {
        throw std::invalid_argument("synth_generate: noise must be in [0,1]");
    }
    SeededRng rng(seed);
    SynthModel model;
    model.cluster_centers.reserve(k_latent);
    for (std::size_t k = 0; k < k_latent; ++k) {
        model.cluster_centers.push_back(gaussian_vector(dim, 1.0, rng));
    }
    model.plant_direction = gaussian_vector(dim, 1.0, rng);
    const double wn = norm2(model.plant_direction);
    for (double& x : model.plant_direction) x /= wn;
    model.cluster_bias = gaussian_vector(k_latent, 0.75, rng);

    Dataset out;
    out.dim = dim;
    out.samples.reserve(n);
    model.cluster_of.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t c = rng.next_below(k_latent);
        InstructionSample s;
        s.id = static_cast<SampleId>(i);
        s.features.resize(dim);
        for (std::size_t j = 0; j < dim; ++j) {
            s.features[j] = model.cluster_centers[c][j] + rng.normal(0.5);
        }
        const double margin = dot(model.plant_direction, s.features) + model.cluster_bias[c];
        int label = margin > 0.0 ? 1 : 0;
        if (rng.uniform01() < noise) label = 1 - label;
        s.label = label;
        model.cluster_of.push_back(static_cast<int>(c));
        out.samples.push_back(std::move(s));
    }
    if (model_out) *model_out = std::move(model);
    return out;
}

/// Samples drawn from k_latent Gaussian clusters with cluster-dependent label
/// margins; labels flip with probability `noise`. Deterministic per seed.
inline Dataset synth_generate(std::size_t n, std::size_t dim, std::size_t k_latent,
                              double noise, std::uint64_t seed) {
    return synth_generate_detailed(n, dim, k_latent, noise, seed, nullptr);
}

} // namespace apa
