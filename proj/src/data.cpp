#include "sundial/data.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <unordered_set>

#include "json.hpp"
#include "sundial/error.hpp"

namespace sundial {

namespace {

using nlohmann::json;

SeriesRecord record_from_json(const json& j, int line_no) {
    if (!j.is_object()) throw ParseError("record is not an object", line_no);
    if (!j.contains("id") || !j.at("id").is_string())
        throw ParseError("missing or non-string 'id'", line_no);
    if (!j.contains("values") || !j.at("values").is_array())
        throw ParseError("missing or non-array 'values'", line_no);
    SeriesRecord rec;
    rec.id = j.at("id").get<std::string>();
    const auto& vals = j.at("values");
    if (vals.empty()) throw DataError("series '" + rec.id + "': empty values");
    rec.values.reserve(vals.size());
    for (std::size_t i = 0; i < vals.size(); ++i) {
        if (!vals[i].is_number())
            throw ParseError("series '" + rec.id + "': non-numeric value at index " +
                                 std::to_string(i),
                             line_no);
        double v = vals[i].get<double>();
        if (!std::isfinite(v))
            throw DataError("series '" + rec.id + "': non-finite value at index " +
                            std::to_string(i));
        rec.values.push_back(static_cast<float>(v));
    }
    if (j.contains("freq")) {
        if (!j.at("freq").is_string()) throw ParseError("non-string 'freq'", line_no);
        rec.freq = j.at("freq").get<std::string>();
    }
    return rec;
}

}  // namespace

std::vector<SeriesRecord> load_corpus(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open corpus file: " + path);
    std::vector<SeriesRecord> corpus;
    std::unordered_set<std::string> seen;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw ParseError(std::string("invalid json: ") + e.what(), line_no);
        }
        auto rec = record_from_json(j, line_no);
        if (!seen.insert(rec.id).second)
            throw DataError("duplicate series id '" + rec.id + "' at line " +
                            std::to_string(line_no));
        corpus.push_back(std::move(rec));
    }
    return corpus;
}

void save_corpus(const std::vector<SeriesRecord>& corpus, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open corpus file for writing: " + path);
    for (const auto& rec : corpus) {
        json j;
        j["id"] = rec.id;
        json vals = json::array();
        for (float v : rec.values) vals.push_back(static_cast<double>(v));
        j["values"] = std::move(vals);
        if (rec.freq) j["freq"] = *rec.freq;
        out << j.dump() << "\n";
    }
    if (!out) throw DataError("write failed: " + path);
}

std::vector<SeriesRecord> s3_flatten(const std::vector<std::vector<float>>& multivariate,
                                     const std::string& base_id) {
    if (multivariate.empty()) throw DataError("s3_flatten: empty matrix");
    std::size_t t = multivariate.front().size();
    std::vector<SeriesRecord> out;
    out.reserve(multivariate.size());
    for (std::size_t m = 0; m < multivariate.size(); ++m) {
        if (multivariate[m].size() != t)
            throw DataError("s3_flatten: ragged row " + std::to_string(m) + " (length " +
                            std::to_string(multivariate[m].size()) + " vs " + std::to_string(t) +
                            ")");
        out.push_back({base_id + "#" + std::to_string(m), multivariate[m], std::nullopt});
    }
    return out;
}

namespace {

double kernel_eval(const Kernel& k, double x, double y, std::int64_t length) {
    switch (k.kind) {
        case Kernel::Kind::linear: {
            double denom = static_cast<double>(length > 1 ? length - 1 : 1);
            double u = x / denom - k.p1;
            double v = y / denom - k.p1;
            return u * v;
        }
        case Kernel::Kind::rbf: {
            double d = (x - y) / k.p1;
            return std::exp(-0.5 * d * d);
        }
        case Kernel::Kind::periodic: {
            double s = std::sin(3.14159265358979323846 * (x - y) / k.p2) / k.p1;
            return std::exp(-2.0 * s * s);
        }
        case Kernel::Kind::white:
            return x == y ? k.p1 * k.p1 : 0.0;
    }
    throw ContractError("unknown kernel kind");
}

// in-place lower Cholesky; false on a non-positive pivot
bool cholesky(std::vector<double>& a, std::int64_t n) {
    for (std::int64_t j = 0; j < n; ++j) {
        double d = a[static_cast<std::size_t>(j * n + j)];
        for (std::int64_t k = 0; k < j; ++k) {
            double l = a[static_cast<std::size_t>(j * n + k)];
            d -= l * l;
        }
        if (d <= 0.0 || !std::isfinite(d)) return false;
        d = std::sqrt(d);
        a[static_cast<std::size_t>(j * n + j)] = d;
        for (std::int64_t i = j + 1; i < n; ++i) {
            double s = a[static_cast<std::size_t>(i * n + j)];
            for (std::int64_t k = 0; k < j; ++k)
                s -= a[static_cast<std::size_t>(i * n + k)] * a[static_cast<std::size_t>(j * n + k)];
            a[static_cast<std::size_t>(i * n + j)] = s / d;
        }
    }
    return true;
}

KernelComposite draw_composite(Rng& rng, std::int64_t length, int max_kernels) {
    KernelComposite comp;
    int n = rng.uniform_int(1, max_kernels);
    for (int i = 0; i < n; ++i) {
        Kernel k;
        switch (rng.uniform_int(0, 3)) {
            case 0:
                k.kind = Kernel::Kind::linear;
                k.p1 = rng.uniform(0.0, 1.0);
                break;
            case 1:
                k.kind = Kernel::Kind::rbf;
                k.p1 = std::exp(rng.uniform(std::log(2.0), std::log(static_cast<double>(length) / 4.0)));
                break;
            case 2:
                k.kind = Kernel::Kind::periodic;
                k.p1 = 1.0;
                k.p2 = std::exp(rng.uniform(std::log(4.0), std::log(static_cast<double>(length) / 4.0)));
                break;
            default:
                k.kind = Kernel::Kind::white;
                k.p1 = rng.uniform(0.05, 0.3);
                break;
        }
        comp.kernels.push_back(k);
        if (i > 0) comp.ops.push_back(rng.uniform() < 0.5 ? '+' : '*');
    }
    return comp;
}

}  // namespace

double KernelComposite::eval(double x, double y, std::int64_t length) const {
    if (kernels.empty()) throw ContractError("empty kernel composite");
    if (ops.size() + 1 != kernels.size())
        throw ContractError("kernel composite: ops/kernels size mismatch");
    double acc = kernel_eval(kernels[0], x, y, length);
    for (std::size_t i = 1; i < kernels.size(); ++i) {
        double k = kernel_eval(kernels[i], x, y, length);
        acc = ops[i - 1] == '+' ? acc + k : acc * k;
    }
    return acc;
}

std::vector<double> gp_sample(const KernelComposite& k, std::int64_t length, Rng& rng) {
    if (length < 1) throw ContractError("gp_sample: length must be positive");
    std::int64_t n = length;
    std::vector<double> cov(static_cast<std::size_t>(n * n));
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j <= i; ++j) {
            double v = k.eval(static_cast<double>(i), static_cast<double>(j), length);
            cov[static_cast<std::size_t>(i * n + j)] = v;
            cov[static_cast<std::size_t>(j * n + i)] = v;
        }
    auto chol = cov;
    if (!cholesky(chol, n)) {
        chol = cov;
        for (std::int64_t i = 0; i < n; ++i) chol[static_cast<std::size_t>(i * n + i)] += 1e-6;
        if (!cholesky(chol, n)) throw DataError("gp_sample: covariance not positive definite");
    }
    std::vector<double> z(static_cast<std::size_t>(n));
    for (auto& v : z) v = rng.normal();
    std::vector<double> path(static_cast<std::size_t>(n), 0.0);
    for (std::int64_t i = 0; i < n; ++i) {
        double acc = 0;
        for (std::int64_t j = 0; j <= i; ++j)
            acc += chol[static_cast<std::size_t>(i * n + j)] * z[static_cast<std::size_t>(j)];
        path[static_cast<std::size_t>(i)] = acc;
    }
    return path;
}

void standardize(std::vector<double>& values) {
    if (values.empty()) throw ContractError("standardize: empty input");
    double mean = 0;
    for (double v : values) mean += v;
    mean /= static_cast<double>(values.size());
    double var = 0;
    for (double v : values) var += (v - mean) * (v - mean);
    var /= static_cast<double>(values.size());
    double std_dev = std::sqrt(var);
    if (std_dev < 1e-12) throw DataError("standardize: series is constant");
    for (auto& v : values) v = (v - mean) / std_dev;
}

SeriesRecord kernel_synth(std::uint64_t seed, std::int64_t length, int max_kernels,
                          const std::string& id) {
    if (length < 16) throw ContractError("kernel_synth: length must be >= 16");
    if (max_kernels < 1) throw ContractError("kernel_synth: max_kernels must be >= 1");
    Rng rng(seed);
    const int max_redraws = 8;
    for (int attempt = 0; attempt < max_redraws; ++attempt) {
        auto comp = draw_composite(rng, length, max_kernels);
        std::vector<double> path;
        try {
            path = gp_sample(comp, length, rng);
            standardize(path);
        } catch (const DataError&) {
            continue;
        }
        SeriesRecord rec;
        rec.id = id.empty() ? "synth-" + std::to_string(seed) : id;
        rec.values.reserve(path.size());
        for (double v : path) rec.values.push_back(static_cast<float>(v));
        return rec;
    }
    throw DataError("kernel_synth: no positive-definite kernel draw after " +
                    std::to_string(max_redraws) + " attempts");
}

std::vector<SeriesRecord> make_synth_corpus(std::uint64_t seed, std::int64_t count,
                                            std::int64_t length, int max_kernels) {
    if (count < 1) throw ContractError("make_synth_corpus: count must be positive");
    std::vector<SeriesRecord> out;
    out.reserve(static_cast<std::size_t>(count));
    Rng base(seed);
    for (std::int64_t i = 0; i < count; ++i) {
        std::uint64_t sub = base.split(static_cast<std::uint64_t>(i) + 1).next_u64();
        char buf[32];
        std::snprintf(buf, sizeof(buf), "synth-%04lld", static_cast<long long>(i));
        out.push_back(kernel_synth(sub, length, max_kernels, buf));
    }
    return out;
}

}  // namespace sundial
