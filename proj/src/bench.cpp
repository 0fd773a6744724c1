#include "cmqr/bench.hpp"

#include <Eigen/QR>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace cmqr {

namespace {

void require(bool ok, const std::string& what) {
    if (!ok) throw std::invalid_argument("BenchConfig: " + what);
}

Matrix gaussian(Rng& rng, Index rows, Index cols) {
    Matrix m(rows, cols);
    for (Index i = 0; i < rows; ++i)
        for (Index j = 0; j < cols; ++j) m(i, j) = rng.normal();
    return m;
}

// Unit rows; mutually orthogonal whenever rows <= cols.
Matrix prototype_rows(Rng& rng, Index rows, Index cols) {
    if (rows <= cols) {
        Eigen::HouseholderQR<Eigen::MatrixXd> qr(Eigen::MatrixXd(gaussian(rng, cols, cols)));
        Eigen::MatrixXd q = qr.householderQ();
        return q.leftCols(rows).transpose();
    }
    Matrix out = gaussian(rng, rows, cols);
    for (Index i = 0; i < rows; ++i) out.row(i).normalize();
    return out;
}

std::vector<int> parse_ints(const std::string& text) {
    std::vector<int> out;
    std::istringstream in(text);
    int v = 0;
    while (in >> v) out.push_back(v);
    return out;
}

std::string join_ints(const std::vector<int>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i > 0) out += ' ';
        out += std::to_string(v[i]);
    }
    return out;
}

std::vector<std::string> split_tabs(const std::string& line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const auto tab = line.find('\t', start);
        out.push_back(line.substr(start, tab - start));
        if (tab == std::string::npos) break;
        start = tab + 1;
    }
    return out;
}

void put_f32(std::string& out, double v) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
    for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xFFu));
}

double get_f32(const unsigned char* p) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(p[b]) << (8 * b);
    return static_cast<double>(std::bit_cast<float>(bits));
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw std::runtime_error("write failed for " + path.string());
}

std::size_t episode_floats(const BenchConfig& cfg) {
    return static_cast<std::size_t>(cfg.clips) * static_cast<std::size_t>(cfg.frames + 1) *
           static_cast<std::size_t>(cfg.dim);
}

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace

void BenchConfig::validate() const {
    require(clips >= 2, "clips must be >= 2");
    require(frames >= 1, "frames must be >= 1");
    require(dim >= 1, "dim must be >= 1");
    require(n_concepts >= 3, "n_concepts must be >= 3 (one is the confounder)");
    require(n_question_types >= 1, "n_question_types must be >= 1");
    require(n_answers >= 2, "n_answers must be >= 2");
    require(n_answers <= n_question_types * causal_concepts(),
            "n_answers exceeds the number of (question type, concept) cells");
    require(n_cues >= clips, "n_cues must be >= clips so every clip carries a distinct cue");
    require(designated_answer >= 0 && designated_answer < n_answers,
            "designated_answer out of range");
    require(confound_strength >= 0.0 && confound_strength <= 1.0,
            "confound_strength must lie in [0, 1]");
    require(noise >= 0.0, "noise must be >= 0");
    require(cue_strength >= 0.0, "cue_strength must be >= 0");
    require(train_size >= 0 && iid_size >= 0 && ood_size >= 0, "split sizes must be >= 0");
}

std::vector<std::pair<std::string, std::string>> BenchConfig::to_pairs() const {
    return {{"clips", std::to_string(clips)},
            {"frames", std::to_string(frames)},
            {"dim", std::to_string(dim)},
            {"n_concepts", std::to_string(n_concepts)},
            {"n_question_types", std::to_string(n_question_types)},
            {"n_answers", std::to_string(n_answers)},
            {"n_cues", std::to_string(n_cues)},
            {"designated_answer", std::to_string(designated_answer)},
            {"confound_strength", format_double(confound_strength)},
            {"noise", format_double(noise)},
            {"cue_strength", format_double(cue_strength)},
            {"train_size", std::to_string(train_size)},
            {"iid_size", std::to_string(iid_size)},
            {"ood_size", std::to_string(ood_size)},
            {"seed", std::to_string(seed)}};
}

BenchConfig BenchConfig::from(KeyValues& kv) {
    BenchConfig c;
    c.clips = static_cast<int>(kv.get_int("clips", c.clips));
    c.frames = static_cast<int>(kv.get_int("frames", c.frames));
    c.dim = static_cast<int>(kv.get_int("dim", c.dim));
    c.n_concepts = static_cast<int>(kv.get_int("n_concepts", c.n_concepts));
    c.n_question_types = static_cast<int>(kv.get_int("n_question_types", c.n_question_types));
    c.n_answers = static_cast<int>(kv.get_int("n_answers", c.n_answers));
    c.n_cues = static_cast<int>(kv.get_int("n_cues", c.n_cues));
    c.designated_answer = static_cast<int>(kv.get_int("designated_answer", c.designated_answer));
    c.confound_strength = kv.get_double("confound_strength", c.confound_strength);
    c.noise = kv.get_double("noise", c.noise);
    c.cue_strength = kv.get_double("cue_strength", c.cue_strength);
    c.train_size = static_cast<int>(kv.get_int("train_size", c.train_size));
    c.iid_size = static_cast<int>(kv.get_int("iid_size", c.iid_size));
    c.ood_size = static_cast<int>(kv.get_int("ood_size", c.ood_size));
    c.seed = kv.get_uint("seed", c.seed);
    c.validate();
    return c;
}

std::string split_name(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::iid_test: return "iid_test";
        case Split::ood_test: return "ood_test";
    }
    throw std::invalid_argument("unknown split");
}

Split parse_split(const std::string& name) {
    if (name == "train") return Split::train;
    if (name == "iid" || name == "iid_test") return Split::iid_test;
    if (name == "ood" || name == "ood_test") return Split::ood_test;
    throw std::invalid_argument("unknown split '" + name + "' (expected train, iid or ood)");
}

BenchWorld make_world(const BenchConfig& cfg) {
    cfg.validate();
    BenchWorld w;
    Rng rng(derive_seed(cfg.seed, "bench/world"));
    const bool joint = cfg.n_concepts + cfg.n_cues <= cfg.dim;
    if (joint) {
        Matrix both = prototype_rows(rng, cfg.n_concepts + cfg.n_cues, cfg.dim);
        w.appearance = both.topRows(cfg.n_concepts);
        w.cues = both.bottomRows(cfg.n_cues);
    } else {
        w.appearance = prototype_rows(rng, cfg.n_concepts, cfg.dim);
        w.cues = prototype_rows(rng, cfg.n_cues, cfg.dim);
    }
    w.motion = prototype_rows(rng, cfg.n_concepts, cfg.dim);

    // Balanced table: every answer covers the same number of cells, up to one.
    const int cells = cfg.n_question_types * cfg.causal_concepts();
    std::vector<int> labels(static_cast<std::size_t>(cells));
    for (int i = 0; i < cells; ++i) labels[static_cast<std::size_t>(i)] = i % cfg.n_answers;
    for (int i = cells - 1; i > 0; --i) {
        const auto j = static_cast<int>(rng.below(static_cast<std::uint64_t>(i + 1)));
        std::swap(labels[static_cast<std::size_t>(i)], labels[static_cast<std::size_t>(j)]);
    }
    w.answer_table.assign(static_cast<std::size_t>(cfg.n_question_types), {});
    for (int q = 0; q < cfg.n_question_types; ++q) {
        for (int c = 0; c < cfg.causal_concepts(); ++c) {
            w.answer_table[static_cast<std::size_t>(q)].push_back(
                labels[static_cast<std::size_t>(q * cfg.causal_concepts() + c)]);
        }
    }
    return w;
}

std::vector<std::string> bench_vocabulary(const BenchConfig& cfg) {
    std::vector<std::string> v;
    for (int q = 0; q < cfg.n_question_types; ++q) v.push_back("qtype_" + std::to_string(q));
    for (int u = 0; u < cfg.n_cues; ++u) v.push_back("cue_" + std::to_string(u));
    return v;
}

int question_type_token(int question_type) { return question_type; }

int cue_token(const BenchConfig& cfg, int cue) { return cfg.n_question_types + cue; }

Episode generate_episode(const BenchConfig& cfg, const BenchWorld& world, Split split, int id) {
    Rng rng(derive_seed(cfg.seed, "bench/episode/" + split_name(split),
                        static_cast<std::uint64_t>(id)));
    auto pick = [&](int n) { return static_cast<int>(rng.below(static_cast<std::uint64_t>(n))); };

    Episode e;
    e.id = id;
    e.question_type = pick(cfg.n_question_types);
    e.causal_concept = pick(cfg.causal_concepts());
    const int causal_clip = pick(cfg.clips);
    e.causal_clips = {causal_clip};
    e.answer = world.answer(e.question_type, e.causal_concept);

    std::vector<int> cues(static_cast<std::size_t>(cfg.n_cues));
    std::iota(cues.begin(), cues.end(), 0);
    for (int i = 0; i < cfg.clips; ++i) {
        const int j = i + pick(cfg.n_cues - i);
        std::swap(cues[static_cast<std::size_t>(i)], cues[static_cast<std::size_t>(j)]);
    }

    std::vector<int> concepts(static_cast<std::size_t>(cfg.clips));
    for (int k = 0; k < cfg.clips; ++k) {
        concepts[static_cast<std::size_t>(k)] =
            k == causal_clip ? e.causal_concept : pick(cfg.causal_concepts());
    }

    const bool designated = e.answer == cfg.designated_answer;
    const bool eligible = split == Split::ood_test ? !designated : designated;
    const bool planted = eligible && rng.uniform() < cfg.confound_strength;
    if (planted) {
        int slot = pick(cfg.clips - 1);
        if (slot >= causal_clip) ++slot;
        concepts[static_cast<std::size_t>(slot)] = cfg.confounder_concept();
        e.confounder_concept = cfg.confounder_concept();
    }

    e.question.ids = {question_type_token(e.question_type),
                      cue_token(cfg, cues[static_cast<std::size_t>(causal_clip)])};

    // Features are rounded through float32 so in-memory and on-disk episodes agree.
    auto f32 = [](double v) { return static_cast<double>(static_cast<float>(v)); };
    e.clips.frames = cfg.frames;
    e.clips.appearance.resize(static_cast<Index>(cfg.clips) * cfg.frames, cfg.dim);
    e.clips.motion.resize(cfg.clips, cfg.dim);
    for (int k = 0; k < cfg.clips; ++k) {
        const int c = concepts[static_cast<std::size_t>(k)];
        const int u = cues[static_cast<std::size_t>(k)];
        for (int t = 0; t < cfg.frames; ++t) {
            const Index row = static_cast<Index>(k) * cfg.frames + t;
            for (int j = 0; j < cfg.dim; ++j) {
                e.clips.appearance(row, j) = f32(world.appearance(c, j) +
                                                 cfg.cue_strength * world.cues(u, j) +
                                                 cfg.noise * rng.normal());
            }
        }
        for (int j = 0; j < cfg.dim; ++j) {
            e.clips.motion(k, j) = f32(world.motion(c, j) + cfg.noise * rng.normal());
        }
    }
    return e;
}

Dataset generate_dataset(const BenchConfig& cfg, Split split) {
    const BenchWorld world = make_world(cfg);
    Dataset d;
    d.config = cfg;
    d.split = split;
    const int n = split == Split::train ? cfg.train_size
                  : split == Split::iid_test ? cfg.iid_size
                                             : cfg.ood_size;
    d.episodes.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) d.episodes.push_back(generate_episode(cfg, world, split, i));
    return d;
}

void write_dataset(const std::filesystem::path& dir, const Dataset& data) {
    std::filesystem::create_directories(dir);
    const auto& cfg = data.config;
    std::string text = "CMQRBENCH v1\n" + to_key_value_text(data.config.to_pairs());
    text += "episodes=" + std::to_string(data.episodes.size()) + "\n";
    std::string payload;
    payload.reserve(data.episodes.size() * episode_floats(cfg) * 4);
    for (const auto& e : data.episodes) {
        if (e.clips.clips() != cfg.clips || e.clips.dim() != cfg.dim || e.clips.frames != cfg.frames) {
            throw DimensionError("write_dataset: episode " + std::to_string(e.id) +
                                 " does not match the config dims");
        }
        const std::size_t offset = payload.size();
        for (Index r = 0; r < e.clips.appearance.rows(); ++r)
            for (Index j = 0; j < cfg.dim; ++j) put_f32(payload, e.clips.appearance(r, j));
        for (Index r = 0; r < e.clips.motion.rows(); ++r)
            for (Index j = 0; j < cfg.dim; ++j) put_f32(payload, e.clips.motion(r, j));
        text += std::to_string(e.id) + "\t" + join_ints(e.question.ids) + "\t" +
                std::to_string(e.answer) + "\t" + join_ints(e.causal_clips) + "\t" +
                std::to_string(e.confounder_concept) + "\t" + std::to_string(e.question_type) +
                "\t" + std::to_string(e.causal_concept) + "\t" + std::to_string(offset) + "\n";
    }
    const auto stem = split_name(data.split);
    write_text(dir / (stem + ".txt"), text);
    write_text(dir / (stem + ".bin"), payload);
}

void generate_split(const BenchConfig& cfg, const std::filesystem::path& dir) {
    cfg.validate();
    for (Split s : {Split::train, Split::iid_test, Split::ood_test}) {
        write_dataset(dir, generate_dataset(cfg, s));
    }
    write_vocabulary(dir / "vocab.txt", bench_vocabulary(cfg));
}

Dataset read_dataset(const std::filesystem::path& dir, Split split) {
    const auto stem = split_name(split);
    const auto txt_path = dir / (stem + ".txt");
    std::ifstream txt(txt_path, std::ios::binary);
    if (!txt) throw std::runtime_error("cannot open " + txt_path.string());
    std::string line;
    if (!std::getline(txt, line) || line != "CMQRBENCH v1") {
        throw std::runtime_error(txt_path.string() + ": missing CMQRBENCH v1 header");
    }
    std::string meta;
    long long count = -1;
    while (std::getline(txt, line)) {
        if (line.rfind("episodes=", 0) == 0) {
            count = std::stoll(line.substr(9));
            break;
        }
        meta += line + "\n";
    }
    if (count < 0) throw std::runtime_error(txt_path.string() + ": missing episode count");
    KeyValues kv = KeyValues::parse(meta);
    Dataset d;
    d.config = BenchConfig::from(kv);
    kv.reject_unknown();
    d.split = split;
    const auto& cfg = d.config;

    const auto bin_path = dir / (stem + ".bin");
    std::ifstream bin(bin_path, std::ios::binary);
    if (!bin) throw std::runtime_error("cannot open " + bin_path.string());
    std::vector<unsigned char> payload((std::istreambuf_iterator<char>(bin)),
                                       std::istreambuf_iterator<char>());
    const std::size_t bytes = episode_floats(cfg) * 4;

    d.episodes.reserve(static_cast<std::size_t>(count));
    for (long long i = 0; i < count; ++i) {
        if (!std::getline(txt, line)) throw std::runtime_error(txt_path.string() + ": truncated");
        const auto f = split_tabs(line);
        if (f.size() != 8) {
            throw std::runtime_error(txt_path.string() + ": malformed record " + std::to_string(i));
        }
        Episode e;
        e.id = std::stoi(f[0]);
        e.question.ids = parse_ints(f[1]);
        e.answer = std::stoi(f[2]);
        e.causal_clips = parse_ints(f[3]);
        e.confounder_concept = std::stoi(f[4]);
        e.question_type = std::stoi(f[5]);
        e.causal_concept = std::stoi(f[6]);
        const auto offset = static_cast<std::size_t>(std::stoull(f[7]));
        if (offset + bytes > payload.size()) {
            throw std::runtime_error(bin_path.string() + ": payload truncated at episode " +
                                     std::to_string(e.id));
        }
        const unsigned char* p = payload.data() + offset;
        e.clips.frames = cfg.frames;
        e.clips.appearance.resize(static_cast<Index>(cfg.clips) * cfg.frames, cfg.dim);
        e.clips.motion.resize(cfg.clips, cfg.dim);
        for (Index r = 0; r < e.clips.appearance.rows(); ++r)
            for (Index j = 0; j < cfg.dim; ++j, p += 4) e.clips.appearance(r, j) = get_f32(p);
        for (Index r = 0; r < e.clips.motion.rows(); ++r)
            for (Index j = 0; j < cfg.dim; ++j, p += 4) e.clips.motion(r, j) = get_f32(p);
        d.episodes.push_back(std::move(e));
    }
    return d;
}

LocalizationMetrics localization_metrics(const std::vector<LocalizationRecord>& selected,
                                         const std::vector<LocalizationRecord>& truth) {
    if (selected.size() != truth.size()) {
        throw std::invalid_argument("localization_metrics: " + std::to_string(selected.size()) +
                                    " selections for " + std::to_string(truth.size()) + " episodes");
    }
    std::size_t hits = 0, n_sel = 0, n_true = 0;
    for (std::size_t i = 0; i < selected.size(); ++i) {
        if (selected[i].episode_id != truth[i].episode_id) {
            throw std::invalid_argument("localization_metrics: episode id mismatch at position " +
                                        std::to_string(i));
        }
        if (selected[i].clips.empty()) {
            throw std::invalid_argument("localization_metrics: empty selection for episode " +
                                        std::to_string(selected[i].episode_id));
        }
        for (int c : selected[i].clips) {
            hits += static_cast<std::size_t>(
                std::count(truth[i].clips.begin(), truth[i].clips.end(), c));
        }
        n_sel += selected[i].clips.size();
        n_true += truth[i].clips.size();
    }
    LocalizationMetrics m;
    m.precision = n_sel > 0 ? static_cast<double>(hits) / static_cast<double>(n_sel) : 0.0;
    m.recall = n_true > 0 ? static_cast<double>(hits) / static_cast<double>(n_true) : 0.0;
    return m;
}

double nearest_prototype_accuracy(const Dataset& data, const BenchWorld& world) {
    if (data.episodes.empty()) return 0.0;
    int correct = 0;
    for (const auto& e : data.episodes) {
        const Matrix summary = e.clips.summary();
        const Matrix scores = summary.row(e.causal_clips.front()) * world.appearance.transpose();
        const int concept_id = argmax(scores);
        if (concept_id < static_cast<int>(world.answer_table.front().size()) &&
            world.answer(e.question_type, concept_id) == e.answer) {
            ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(data.episodes.size());
}

double ShortcutProbe::feature(const Episode& e, const BenchWorld& world, int confounder) {
    const Matrix summary = e.clips.summary();
    return (summary * world.appearance.row(confounder).transpose()).maxCoeff();
}

ShortcutProbe ShortcutProbe::fit(const Dataset& train, const BenchWorld& world, int iterations,
                                 double lr) {
    const int confounder = train.config.confounder_concept();
    const auto n = train.episodes.size();
    if (n == 0) throw std::invalid_argument("ShortcutProbe::fit: empty dataset");
    std::vector<double> x(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
        x[i] = feature(train.episodes[i], world, confounder);
        y[i] = train.episodes[i].answer == train.config.designated_answer ? 1.0 : 0.0;
    }
    ShortcutProbe p;
    for (int it = 0; it < iterations; ++it) {
        double gw = 0.0, gb = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double r = sigmoid(p.weight * x[i] + p.bias) - y[i];
            gw += r * x[i];
            gb += r;
        }
        p.weight -= lr * gw / static_cast<double>(n);
        p.bias -= lr * gb / static_cast<double>(n);
    }
    return p;
}

double ShortcutProbe::accuracy(const Dataset& data, const BenchWorld& world) const {
    if (data.episodes.empty()) return 0.0;
    const int confounder = data.config.confounder_concept();
    int correct = 0;
    for (const auto& e : data.episodes) {
        const bool predicted = sigmoid(weight * feature(e, world, confounder) + bias) >= 0.5;
        const bool actual = e.answer == data.config.designated_answer;
        if (predicted == actual) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(data.episodes.size());
}

}  // namespace cmqr
