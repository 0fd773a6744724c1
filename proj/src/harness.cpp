#include "cmqr/harness.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace cmqr {

// --- RunConfig ---------------------------------------------------------------

void RunConfig::validate() const {
    auto require = [](bool ok, const std::string& what) {
        if (!ok) throw ConfigError("RunConfig: " + what);
    };
    require(width >= 1, "width must be positive");
    require(layers >= 1, "layers must be positive");
    require(heads >= 1 && (2 * width) % heads == 0, "heads must be positive and divide 2 * width");
    require(n_clusters >= 1, "n_clusters must be positive");
    require(k_sel >= 1, "k_sel must be positive");
    require(decoder_hidden >= 1, "decoder_hidden must be positive");
    require(causal_branch || !ecsl, "ecsl=true requires causal_branch=true");
    require(tau_start > 0.0 && tau_end > 0.0, "temperatures must be positive");
    require(lr > 0.0, "lr must be positive");
    require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, "betas must lie in [0, 1)");
    require(eps > 0.0, "eps must be positive");
    require(weight_decay >= 0.0, "weight_decay must be non-negative");
    require(lambda_c >= 0.0 && lambda_a >= 0.0, "loss weights must be non-negative");
    require(batch_size >= 1, "batch_size must be positive");
    require(epochs >= 1, "epochs must be positive");
    require(lr_patience >= 1, "lr_patience must be positive");
    require(lr_threshold >= 0.0, "lr_threshold must be non-negative");
    require(dictionary_every >= 1, "dictionary_every must be positive");
    require(kmeans_iters >= 1, "kmeans_iters must be positive");
    require(checkpoint_every >= 1, "checkpoint_every must be positive");
    require(train_limit >= 0, "train_limit must be non-negative");
}

std::vector<std::pair<std::string, std::string>> RunConfig::to_pairs() const {
    auto b = [](bool v) { return std::string(v ? "true" : "false"); };
    return {{"width", std::to_string(width)},
            {"layers", std::to_string(layers)},
            {"heads", std::to_string(heads)},
            {"n_clusters", std::to_string(n_clusters)},
            {"k_sel", std::to_string(k_sel)},
            {"decoder_hidden", std::to_string(decoder_hidden)},
            {"causal_branch", b(causal_branch)},
            {"ecsl", b(ecsl)},
            {"tau_start", format_double(tau_start)},
            {"tau_end", format_double(tau_end)},
            {"lr", format_double(lr)},
            {"beta1", format_double(beta1)},
            {"beta2", format_double(beta2)},
            {"eps", format_double(eps)},
            {"weight_decay", format_double(weight_decay)},
            {"lambda_c", format_double(lambda_c)},
            {"lambda_a", format_double(lambda_a)},
            {"batch_size", std::to_string(batch_size)},
            {"epochs", std::to_string(epochs)},
            {"lr_patience", std::to_string(lr_patience)},
            {"lr_threshold", format_double(lr_threshold)},
            {"seed", std::to_string(seed)},
            {"dictionary_every", std::to_string(dictionary_every)},
            {"kmeans_iters", std::to_string(kmeans_iters)},
            {"checkpoint_every", std::to_string(checkpoint_every)},
            {"train_limit", std::to_string(train_limit)},
            {"eval_every_epoch", b(eval_every_epoch)}};
}

RunConfig RunConfig::from(KeyValues& kv) {
    RunConfig c;
    auto i = [&](const char* k, int d) { return static_cast<int>(kv.get_int(k, d)); };
    c.width = kv.get_int("width", c.width);
    c.layers = i("layers", c.layers);
    c.heads = i("heads", c.heads);
    c.n_clusters = i("n_clusters", c.n_clusters);
    c.k_sel = i("k_sel", c.k_sel);
    c.decoder_hidden = kv.get_int("decoder_hidden", c.decoder_hidden);
    c.causal_branch = kv.get_bool("causal_branch", c.causal_branch);
    c.ecsl = kv.get_bool("ecsl", c.ecsl);
    c.tau_start = kv.get_double("tau_start", c.tau_start);
    c.tau_end = kv.get_double("tau_end", c.tau_end);
    c.lr = kv.get_double("lr", c.lr);
    c.beta1 = kv.get_double("beta1", c.beta1);
    c.beta2 = kv.get_double("beta2", c.beta2);
    c.eps = kv.get_double("eps", c.eps);
    c.weight_decay = kv.get_double("weight_decay", c.weight_decay);
    c.lambda_c = kv.get_double("lambda_c", c.lambda_c);
    c.lambda_a = kv.get_double("lambda_a", c.lambda_a);
    c.batch_size = i("batch_size", c.batch_size);
    c.epochs = i("epochs", c.epochs);
    c.lr_patience = i("lr_patience", c.lr_patience);
    c.lr_threshold = kv.get_double("lr_threshold", c.lr_threshold);
    c.seed = kv.get_uint("seed", c.seed);
    c.dictionary_every = i("dictionary_every", c.dictionary_every);
    c.kmeans_iters = i("kmeans_iters", c.kmeans_iters);
    c.checkpoint_every = i("checkpoint_every", c.checkpoint_every);
    c.train_limit = i("train_limit", c.train_limit);
    c.eval_every_epoch = kv.get_bool("eval_every_epoch", c.eval_every_epoch);
    c.validate();
    return c;
}

RunConfig RunConfig::parse(const std::string& text) {
    KeyValues kv = KeyValues::parse(text);
    RunConfig c = from(kv);
    kv.reject_unknown();
    return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
    KeyValues kv = KeyValues::load(path);
    RunConfig c = from(kv);
    kv.reject_unknown();
    return c;
}

AdamOptions RunConfig::adam() const {
    AdamOptions a;
    a.lr = lr;
    a.beta1 = beta1;
    a.beta2 = beta2;
    a.eps = eps;
    a.weight_decay = weight_decay;
    return a;
}

ModelConfig RunConfig::model_config(const BenchConfig& data) const {
    return model_config(data.n_question_types + data.n_cues, data.dim, data.clips, data.n_answers);
}

ModelConfig RunConfig::model_config(int vocab_size, int feature_dim, int clips, int n_answers) const {
    ModelConfig m;
    m.vocab_size = vocab_size;
    m.feature_dim = feature_dim;
    m.clips = clips;
    m.n_answers = n_answers;
    m.width = width;
    m.layers = layers;
    m.heads = heads;
    m.n_clusters = n_clusters;
    m.k_sel = k_sel;
    m.decoder_hidden = decoder_hidden;
    m.causal_branch = causal_branch;
    m.ecsl = ecsl;
    m.validate();
    return m;
}

double RunConfig::temperature(int epoch) const {
    if (epochs <= 1) return tau_start;
    const double f = static_cast<double>(std::min(epoch, epochs - 1)) / static_cast<double>(epochs - 1);
    return tau_start + (tau_end - tau_start) * f;
}

// --- LR schedule -------------------------------------------------------------

double lr_schedule_step(LrSchedule& s, double epoch_loss) {
    if (epoch_loss < s.best_loss - s.threshold) {
        s.best_loss = epoch_loss;
        s.bad_epochs = 0;
    } else {
        s.best_loss = std::min(s.best_loss, epoch_loss);
        ++s.bad_epochs;
        if (s.bad_epochs >= s.patience) {
            s.lr *= 0.5;
            s.bad_epochs = 0;
        }
    }
    return s.lr;
}

// --- checkpoints -------------------------------------------------------------

namespace {

const char kMagic[4] = {'C', 'M', 'Q', 'R'};

void put_u32(std::string& out, std::uint32_t v) {
    char buf[4];
    for (int b = 0; b < 4; ++b) buf[b] = static_cast<char>((v >> (8 * b)) & 0xFFu);
    out.append(buf, 4);
}

void put_u64(std::string& out, std::uint64_t v) {
    char buf[8];
    for (int b = 0; b < 8; ++b) buf[b] = static_cast<char>((v >> (8 * b)) & 0xFFu);
    out.append(buf, 8);
}

std::uint64_t fnv1a(const char* data, std::size_t n) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= static_cast<unsigned char>(data[i]);
        h *= 0x100000001b3ULL;
    }
    return h;
}

void put_record(std::string& out, const std::string& name, const Matrix& m, int rank) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_u32(out, static_cast<std::uint32_t>(rank));
    if (rank == 2) put_u64(out, static_cast<std::uint64_t>(m.rows()));
    put_u64(out, static_cast<std::uint64_t>(rank == 2 ? m.cols() : m.size()));
    for (Index i = 0; i < m.size(); ++i) put_u64(out, std::bit_cast<std::uint64_t>(m.data()[i]));
}

void put_scalar(std::string& out, const std::string& name, double v) {
    put_record(out, name, Matrix::Constant(1, 1, v), 1);
}

class Reader {
public:
    Reader(const std::string& bytes, std::size_t end) : bytes_(bytes), end_(end) {}

    bool done() const { return pos_ >= end_; }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(byte(pos_ + b)) << (8 * b);
        pos_ += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int b = 0; b < 8; ++b) v |= static_cast<std::uint64_t>(byte(pos_ + b)) << (8 * b);
        pos_ += 8;
        return v;
    }
    std::string text(std::size_t n) {
        need(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

private:
    unsigned char byte(std::size_t i) const { return static_cast<unsigned char>(bytes_[i]); }
    void need(std::size_t n) const {
        if (pos_ + n > end_) throw CheckpointError("checkpoint truncated");
    }
    const std::string& bytes_;
    std::size_t end_;
    std::size_t pos_ = 0;
};

}  // namespace

std::string config_snapshot(const RunConfig& run, const ModelConfig& model) {
    auto pairs = run.to_pairs();
    pairs.emplace_back("model.vocab_size", std::to_string(model.vocab_size));
    pairs.emplace_back("model.feature_dim", std::to_string(model.feature_dim));
    pairs.emplace_back("model.clips", std::to_string(model.clips));
    pairs.emplace_back("model.n_answers", std::to_string(model.n_answers));
    return to_key_value_text(pairs);
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
    std::string out(kMagic, 4);
    out.reserve(24 * ckpt.model.store.scalar_count() + 64 * ckpt.model.store.size() + 4096);
    put_u32(out, Checkpoint::version);
    const std::string snap = config_snapshot(ckpt.run, ckpt.model_config);
    put_u32(out, static_cast<std::uint32_t>(snap.size()));
    out += snap;
    for (const auto& [name, p] : ckpt.model.store.entries()) {
        put_record(out, "param/" + name, p.value, p.rank);
        put_record(out, "adam_m/" + name, p.m, p.rank);
        put_record(out, "adam_v/" + name, p.v, p.rank);
    }
    for (const GlobalDictionary* d : {&ckpt.model.appearance_dict, &ckpt.model.motion_dict}) {
        put_record(out, "dict/" + d->source + "/centroids", d->centroids, 2);
        Matrix counts(1, static_cast<Index>(d->counts.size()));
        for (std::size_t i = 0; i < d->counts.size(); ++i) {
            counts(0, static_cast<Index>(i)) = static_cast<double>(d->counts[i]);
        }
        put_record(out, "dict/" + d->source + "/counts", counts, 1);
    }
    const auto seed = ckpt.run.seed;
    put_scalar(out, "state/epoch", ckpt.state.epoch);
    put_scalar(out, "state/adam_step", static_cast<double>(ckpt.model.store.step));
    put_scalar(out, "state/lr", ckpt.state.schedule.lr);
    put_scalar(out, "state/best_loss", ckpt.state.schedule.best_loss);
    put_scalar(out, "state/bad_epochs", ckpt.state.schedule.bad_epochs);
    Matrix rng(1, 2);
    rng << static_cast<double>(seed >> 32), static_cast<double>(seed & 0xFFFFFFFFULL);
    put_record(out, "state/rng_seed", rng, 1);
    put_u64(out, fnv1a(out.data(), out.size()));
    return out;
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
    if (bytes.size() < 4 + 4 + 4 + 8) throw CheckpointError("checkpoint truncated");
    if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw CheckpointError("not a CMQR checkpoint");
    const std::size_t body = bytes.size() - 8;
    std::uint64_t stored = 0;
    for (int b = 0; b < 8; ++b) {
        stored |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[body + static_cast<std::size_t>(b)])) << (8 * b);
    }
    if (stored != fnv1a(bytes.data(), body)) throw CheckpointError("checkpoint checksum mismatch");

    Reader r(bytes, body);
    r.text(4);
    const auto version = r.u32();
    if (version != Checkpoint::version) {
        throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
    }
    const std::string snap = r.text(r.u32());
    KeyValues kv = KeyValues::parse(snap);
    Checkpoint ck;
    ck.run = RunConfig::from(kv);
    const auto dim = [&](const char* key) { return static_cast<int>(kv.get_int(key, 0)); };
    ck.model_config = ck.run.model_config(dim("model.vocab_size"), dim("model.feature_dim"),
                                          dim("model.clips"), dim("model.n_answers"));
    kv.reject_unknown();
    ck.model = make_model(ck.model_config, ck.run.seed);

    std::map<std::string, std::pair<Matrix, int>> records;
    while (!r.done()) {
        const std::string name = r.text(r.u32());
        const int rank = static_cast<int>(r.u32());
        if (rank != 1 && rank != 2) throw CheckpointError("record " + name + ": bad rank");
        const auto rows = rank == 2 ? r.u64() : 1;
        const auto cols = r.u64();
        if (rows * cols > (body / 8)) throw CheckpointError("record " + name + ": bad extents");
        Matrix m(static_cast<Index>(rows), static_cast<Index>(cols));
        for (Index i = 0; i < m.size(); ++i) m.data()[i] = std::bit_cast<double>(r.u64());
        if (!records.emplace(name, std::make_pair(std::move(m), rank)).second) {
            throw CheckpointError("duplicate record " + name);
        }
    }
    auto take = [&](const std::string& name) -> Matrix& {
        auto it = records.find(name);
        if (it == records.end()) throw CheckpointError("checkpoint missing record " + name);
        return it->second.first;
    };
    auto shaped = [&](const std::string& name, const Matrix& like) {
        Matrix& m = take(name);
        if (m.rows() != like.rows() || m.cols() != like.cols()) {
            throw CheckpointError("record " + name + ": shape " + shape_string(m) + " expected " +
                                  shape_string(like));
        }
        return m;
    };
    for (auto& [name, p] : ck.model.store.entries()) {
        p.value = shaped("param/" + name, p.value);
        p.m = shaped("adam_m/" + name, p.m);
        p.v = shaped("adam_v/" + name, p.v);
    }
    for (GlobalDictionary* d : {&ck.model.appearance_dict, &ck.model.motion_dict}) {
        d->centroids = take("dict/" + d->source + "/centroids");
        const Matrix& counts = take("dict/" + d->source + "/counts");
        d->counts.clear();
        for (Index i = 0; i < counts.size(); ++i) d->counts.push_back(static_cast<std::int64_t>(counts.data()[i]));
    }
    ck.state.epoch = static_cast<int>(take("state/epoch")(0, 0));
    ck.model.store.step = static_cast<std::int64_t>(take("state/adam_step")(0, 0));
    ck.state.schedule.lr = take("state/lr")(0, 0);
    ck.state.schedule.best_loss = take("state/best_loss")(0, 0);
    ck.state.schedule.bad_epochs = static_cast<int>(take("state/bad_epochs")(0, 0));
    ck.state.schedule.patience = ck.run.lr_patience;
    ck.state.schedule.threshold = ck.run.lr_threshold;
    const Matrix& rng = take("state/rng_seed");
    const auto seed = (static_cast<std::uint64_t>(rng(0, 0)) << 32) | static_cast<std::uint64_t>(rng(0, 1));
    if (seed != ck.run.seed) throw CheckpointError("checkpoint seed record disagrees with config");
    return ck;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    const std::string bytes = serialize_checkpoint(ckpt);
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw CheckpointError("cannot write " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) throw CheckpointError("write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return deserialize_checkpoint(ss.str());
}

// --- evaluation --------------------------------------------------------------

namespace {

std::string fmt(double v) { return format_double(v); }

}  // namespace

std::string EvalReport::to_text() const {
    return to_key_value_text({{"split", split},
                              {"episodes", std::to_string(episodes)},
                              {"accuracy", fmt(accuracy)},
                              {"accuracy_causal_head", fmt(accuracy_c)},
                              {"loc_precision", fmt(loc_precision)},
                              {"loc_recall", fmt(loc_recall)},
                              {"loss_o", fmt(loss_o)},
                              {"loss_c", fmt(loss_c)},
                              {"loss_a", fmt(loss_a)},
                              {"loss_total", fmt(loss_total)}});
}

EvalReport evaluate(Model& model, const RunConfig& run, const Dataset& data,
                    const EvalOptions& options) {
    const auto& cfg = model.config;
    if (data.config.dim != cfg.feature_dim || data.config.clips != cfg.clips ||
        data.config.n_answers != cfg.n_answers ||
        data.config.n_question_types + data.config.n_cues > cfg.vocab_size) {
        throw DimensionError("evaluate: dataset dims do not match the model");
    }
    if (options.oracle_mask && !cfg.ecsl) {
        throw std::invalid_argument("evaluate: oracle mask needs an ECSL model");
    }
    EvalReport rep;
    rep.split = split_name(data.split);
    rep.episodes = data.episodes.size();
    std::size_t correct = 0, correct_c = 0;
    std::vector<LocalizationRecord> sel, truth;
    for (const auto& e : data.episodes) {
        Tape tape;
        tape.set_grad_enabled(false);
        ForwardOptions fo;
        fo.train = false;
        fo.temperature = run.tau_end;
        fo.weights = run.loss_weights();
        fo.stream = derive_seed(run.seed, "eval/" + rep.split, static_cast<std::uint64_t>(e.id));
        if (options.oracle_mask) fo.forced_clips = &e.causal_clips;
        const ForwardResult r = forward(tape, model, e, fo);
        EpisodeOutcome o;
        o.episode_id = e.id;
        o.target = e.answer;
        o.predicted = r.pred_v.predicted;
        o.loss_o = r.loss.original;
        o.loss_c = r.loss.causal;
        o.loss_a = r.loss.consistency;
        if (r.pred_c) o.predicted_c = r.pred_c->predicted;
        if (r.mask) {
            o.probs = r.mask->probs;
            o.selector = r.mask->selector;
            o.selected = r.mask->selected;
            sel.push_back({e.id, o.selected});
            truth.push_back({e.id, e.causal_clips});
        }
        correct += o.predicted == o.target ? 1 : 0;
        correct_c += o.predicted_c == o.target ? 1 : 0;
        rep.loss_o += o.loss_o;
        rep.loss_c += o.loss_c;
        rep.loss_a += o.loss_a;
        rep.loss_total += r.loss.total;
        rep.outcomes.push_back(std::move(o));
    }
    const double n = std::max<double>(1.0, static_cast<double>(rep.episodes));
    rep.accuracy = static_cast<double>(correct) / n;
    rep.accuracy_c = cfg.causal_branch ? static_cast<double>(correct_c) / n : std::nan("");
    rep.loss_o /= n;
    rep.loss_c /= n;
    rep.loss_a /= n;
    rep.loss_total /= n;
    if (cfg.ecsl && !sel.empty()) {
        const auto m = localization_metrics(sel, truth);
        rep.loc_precision = m.precision;
        rep.loc_recall = m.recall;
    } else {
        rep.loc_precision = std::nan("");
        rep.loc_recall = std::nan("");
    }
    return rep;
}

void write_predictions_csv(const std::filesystem::path& path, const EvalReport& report) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "episode_id,predicted,target,loss_o,loss_c,loss_a\n";
    for (const auto& o : report.outcomes) {
        out << o.episode_id << ',' << o.predicted << ',' << o.target << ',' << fmt(o.loss_o) << ','
            << fmt(o.loss_c) << ',' << fmt(o.loss_a) << '\n';
    }
}

void write_mask_csv(const std::filesystem::path& path, const EvalReport& report) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "episode_id,clip_index,p,S\n";
    for (const auto& o : report.outcomes) {
        if (o.probs.size() == 0) throw std::invalid_argument("write_mask_csv: model has no ECSL selector");
        for (Index k = 0; k < o.probs.cols(); ++k) {
            out << o.episode_id << ',' << k << ',' << fmt(o.probs(0, k)) << ','
                << fmt(o.selector(0, k)) << '\n';
        }
    }
}

// --- training ----------------------------------------------------------------

std::string metrics_header() {
    return "epoch,lr,loss_o,loss_c,loss_a,loss_total,train_acc,iid_acc,ood_acc,loc_precision,loc_recall";
}

std::string metrics_row(const EpochMetrics& m) {
    return std::to_string(m.epoch) + "," + fmt(m.lr) + "," + fmt(m.loss_o) + "," + fmt(m.loss_c) +
           "," + fmt(m.loss_a) + "," + fmt(m.loss_total) + "," + fmt(m.train_acc) + "," +
           fmt(m.iid_acc) + "," + fmt(m.ood_acc) + "," + fmt(m.loc_precision) + "," +
           fmt(m.loc_recall);
}

TrainData load_train_data(const std::filesystem::path& dir) {
    TrainData d;
    d.train = read_dataset(dir, Split::train);
    d.iid = read_dataset(dir, Split::iid_test);
    d.ood = read_dataset(dir, Split::ood_test);
    return d;
}

namespace {

// Keeps the header and every row for epochs before `epoch`, so a resumed run
// continues the same file.
void truncate_metrics(const std::filesystem::path& path, int epoch) {
    std::vector<std::string> keep{metrics_header()};
    std::ifstream in(path);
    std::string line;
    bool first = true;
    while (in && std::getline(in, line)) {
        if (first) {
            first = false;
            continue;
        }
        if (line.empty()) continue;
        if (std::stoi(line.substr(0, line.find(','))) < epoch) keep.push_back(line);
    }
    in.close();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    for (const auto& l : keep) out << l << '\n';
}

std::string epoch_name(int epoch) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "epoch_%03d.ckpt", epoch);
    return buf;
}

}  // namespace

Checkpoint train(const RunConfig& run, const TrainData& data, const TrainOptions& options) {
    run.validate();
    const ModelConfig mc = run.model_config(data.train.config);
    Checkpoint ck;
    if (options.resume != nullptr) {
        ck = *options.resume;
        if (config_snapshot(ck.run, ck.model_config) != config_snapshot(run, mc)) {
            throw ConfigError("resume: checkpoint config differs from the run config");
        }
    } else {
        ck.run = run;
        ck.model_config = mc;
        ck.model = make_model(mc, run.seed);
        ck.state.schedule.lr = run.lr;
        ck.state.schedule.patience = run.lr_patience;
        ck.state.schedule.threshold = run.lr_threshold;
    }
    Model& model = ck.model;

    std::vector<Episode> train_set = data.train.episodes;
    if (run.train_limit > 0 && static_cast<std::size_t>(run.train_limit) < train_set.size()) {
        train_set.resize(static_cast<std::size_t>(run.train_limit));
    }
    if (train_set.empty()) throw std::invalid_argument("train: no training episodes");

    std::filesystem::path metrics_path;
    if (!options.out_dir.empty()) {
        std::filesystem::create_directories(options.out_dir);
        metrics_path = options.out_dir / "metrics.csv";
        truncate_metrics(metrics_path, ck.state.epoch);
    }

    const int end = options.stop_after >= 0 ? std::min(run.epochs, options.stop_after) : run.epochs;
    for (int epoch = ck.state.epoch; epoch < end; ++epoch) {
        if (epoch % run.dictionary_every == 0 || model.appearance_dict.size() == 0) {
            rebuild_dictionaries(model, train_set, run.kmeans_iters,
                                 derive_seed(run.seed, "dictionary", static_cast<std::uint64_t>(epoch)));
        }
        const double tau = run.temperature(epoch);
        AdamOptions adam = run.adam();
        adam.lr = ck.state.schedule.lr;

        std::vector<std::size_t> order(train_set.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng shuffle(derive_seed(run.seed, "shuffle", static_cast<std::uint64_t>(epoch)));
        for (std::size_t i = order.size() - 1; i > 0; --i) {
            std::swap(order[i], order[static_cast<std::size_t>(shuffle.below(i + 1))]);
        }

        EpochMetrics m;
        m.epoch = epoch;
        m.lr = adam.lr;
        std::size_t correct = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(run.batch_size)) {
            const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(run.batch_size));
            model.store.zero_grad();
            for (std::size_t b = start; b < stop; ++b) {
                const Episode& e = train_set[order[b]];
                Tape tape;
                ForwardOptions fo;
                fo.train = true;
                fo.temperature = tau;
                fo.weights = run.loss_weights();
                fo.stream = derive_seed(run.seed, "train", static_cast<std::uint64_t>(epoch),
                                        static_cast<std::uint64_t>(e.id));
                const ForwardResult r = forward(tape, model, e, fo);
                if (!std::isfinite(r.loss.total)) {
                    throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) +
                                       ", episode " + std::to_string(e.id));
                }
                tape.backward(r.loss.total_var);
                m.loss_o += r.loss.original;
                m.loss_c += r.loss.causal;
                m.loss_a += r.loss.consistency;
                m.loss_total += r.loss.total;
                correct += r.pred_v.predicted == e.answer ? 1 : 0;
            }
            model.store.scale_grads(1.0 / static_cast<double>(stop - start));
            adam_step(model.store, adam);
        }
        const double n = static_cast<double>(train_set.size());
        m.loss_o /= n;
        m.loss_c /= n;
        m.loss_a /= n;
        m.loss_total /= n;
        m.train_acc = static_cast<double>(correct) / n;
        lr_schedule_step(ck.state.schedule, m.loss_total);

        if (run.eval_every_epoch) {
            const EvalReport iid = evaluate(model, run, data.iid);
            const EvalReport ood = evaluate(model, run, data.ood);
            m.iid_acc = iid.accuracy;
            m.ood_acc = ood.accuracy;
            m.loc_precision = iid.loc_precision;
            m.loc_recall = iid.loc_recall;
        } else {
            m.iid_acc = m.ood_acc = m.loc_precision = m.loc_recall = std::nan("");
        }
        ck.state.epoch = epoch + 1;

        if (!options.out_dir.empty()) {
            std::ofstream out(metrics_path, std::ios::binary | std::ios::app);
            out << metrics_row(m) << '\n';
            out.flush();
            save_checkpoint(ck, options.out_dir / "last.ckpt");
            if (ck.state.epoch % run.checkpoint_every == 0) {
                save_checkpoint(ck, options.out_dir / epoch_name(ck.state.epoch));
            }
        }
        if (options.on_epoch) options.on_epoch(m);
    }
    return ck;
}

}  // namespace cmqr
