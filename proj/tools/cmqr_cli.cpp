#include "cmqr/bench.hpp"
#include "cmqr/gradcheck_suite.hpp"
#include "cmqr/harness.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>

using namespace cmqr;

namespace {

int cmd_gen(const std::string& config, const std::string& out) {
    KeyValues kv = KeyValues::load(config);
    const BenchConfig cfg = BenchConfig::from(kv);
    kv.reject_unknown();
    generate_split(cfg, out);
    std::cout << "wrote train/iid_test/ood_test (" << cfg.train_size << "/" << cfg.iid_size << "/"
              << cfg.ood_size << " episodes) to " << out << "\n";
    return 0;
}

int cmd_train(const std::string& config, const std::string& data, const std::string& out,
              const std::string& resume, int stop_after) {
    const RunConfig run = RunConfig::load(config);
    const TrainData td = load_train_data(data);
    Checkpoint from;
    TrainOptions opts;
    opts.out_dir = out;
    opts.stop_after = stop_after;
    if (!resume.empty()) {
        from = load_checkpoint(resume);
        opts.resume = &from;
        std::cout << "resuming at epoch " << from.state.epoch << "\n";
    }
    std::cout << metrics_header() << "\n";
    opts.on_epoch = [](const EpochMetrics& m) { std::cout << metrics_row(m) << std::endl; };
    const Checkpoint ck = train(run, td, opts);
    std::cout << "finished " << ck.state.epoch << " epochs; checkpoint " << (std::filesystem::path(out) / "last.ckpt").string()
              << "\n";
    return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data, const std::string& split,
             std::string report_path, const std::string& predictions, bool oracle_mask) {
    Checkpoint ck = load_checkpoint(ckpt_path);
    const Dataset ds = read_dataset(data, parse_split(split));
    EvalOptions eo;
    eo.oracle_mask = oracle_mask;
    const EvalReport rep = evaluate(ck.model, ck.run, ds, eo);
    if (report_path.empty()) {
        report_path = (std::filesystem::path(ckpt_path).parent_path() /
                       ("eval_" + split_name(ds.split) + (oracle_mask ? "_oracle" : "") + ".txt"))
                          .string();
    }
    std::ofstream out(report_path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + report_path);
    out << rep.to_text();
    std::cout << rep.to_text() << "report: " << report_path << "\n";
    if (!predictions.empty()) write_predictions_csv(predictions, rep);
    return 0;
}

int cmd_gradcheck(std::uint64_t seed) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto cases = run_gradcheck_suite(seed);
    bool ok = true;
    for (const auto& c : cases) {
        std::printf("%-28s %s  max_rel_err=%.3e  tol=%.0e  coords=%zu  worst=%s[%lld]\n", c.name.c_str(),
                    c.passed() ? "PASS" : "FAIL", c.report.max_relative_error, c.tolerance,
                    c.report.coordinates, c.report.worst_parameter.c_str(),
                    static_cast<long long>(c.report.worst_index));
        ok = ok && c.passed();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("gradcheck %s in %.2f s\n", ok ? "passed" : "FAILED", secs);
    return ok ? 0 : 1;
}

int cmd_localize(const std::string& ckpt_path, const std::string& data, const std::string& out,
                 const std::string& split) {
    Checkpoint ck = load_checkpoint(ckpt_path);
    if (!ck.model_config.ecsl) throw std::invalid_argument("localize: checkpoint has no ECSL selector");
    const Dataset ds = read_dataset(data, parse_split(split));
    const EvalReport rep = evaluate(ck.model, ck.run, ds);
    write_mask_csv(out, rep);
    std::cout << "loc_precision=" << format_double(rep.loc_precision)
              << "\nloc_recall=" << format_double(rep.loc_recall) << "\nmasks: " << out << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Cross-modal causal video question answering: data, training and evaluation"};
    app.require_subcommand(1);

    std::string config, out, data, resume, ckpt, split = "iid", report, predictions;
    int stop_after = -1;
    bool oracle_mask = false;
    std::uint64_t seed = 1;

    auto* gen = app.add_subcommand("gen", "generate the synthetic benchmark");
    gen->add_option("--config", config, "benchmark key=value config")->required()->check(CLI::ExistingFile);
    gen->add_option("--out", out, "output directory")->required();

    auto* tr = app.add_subcommand("train", "train a model");
    tr->add_option("--config", config, "run key=value config")->required()->check(CLI::ExistingFile);
    tr->add_option("--data", data, "benchmark directory")->required()->check(CLI::ExistingDirectory);
    tr->add_option("--out", out, "output directory")->required();
    tr->add_option("--resume", resume, "checkpoint to continue from")->check(CLI::ExistingFile);
    tr->add_option("--stop-after", stop_after, "stop once this many epochs are complete");

    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
    ev->add_option("--ckpt", ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
    ev->add_option("--data", data, "benchmark directory")->required()->check(CLI::ExistingDirectory);
    ev->add_option("--split", split, "iid or ood")->check(CLI::IsMember({"iid", "ood", "train"}));
    ev->add_option("--report", report, "report path (default: next to the checkpoint)");
    ev->add_option("--predictions", predictions, "optional per-episode prediction CSV");
    ev->add_flag("--oracle-mask", oracle_mask, "force the ground-truth causal clips as the mask");

    auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every module");
    gc->add_option("--seed", seed, "seed for the toy problems");

    auto* lo = app.add_subcommand("localize", "dump per-clip scene probabilities and masks");
    lo->add_option("--ckpt", ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
    lo->add_option("--data", data, "benchmark directory")->required()->check(CLI::ExistingDirectory);
    lo->add_option("--out", out, "mask CSV path")->required();
    lo->add_option("--split", split, "iid or ood")->check(CLI::IsMember({"iid", "ood", "train"}));

    CLI11_PARSE(app, argc, argv);
    try {
        if (*gen) return cmd_gen(config, out);
        if (*tr) return cmd_train(config, data, out, resume, stop_after);
        if (*ev) return cmd_eval(ckpt, data, split, report, predictions, oracle_mask);
        if (*gc) return cmd_gradcheck(seed);
        if (*lo) return cmd_localize(ckpt, data, out, split);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
