// mdnik: command-line front end.
//
// Exit codes (all subcommands):
//   0  success
//   1  runtime failure (training divergence, I/O failure while writing)
//   2  usage or validation error (bad flags, malformed input files)

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numbers>
#include <sstream>

#include "mdnik/errors.hpp"
#include "mdnik/ik_numeric.hpp"
#include "mdnik/kinematics.hpp"
#include "mdnik/mdn.hpp"
#include "mdnik/pipeline.hpp"
#include "mdnik/vision.hpp"

using namespace mdnik;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

constexpr double kRadToDeg = 180.0 / std::numbers::pi;

std::string fixed(double v, int digits) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("cannot write '" + path + "'");
    out << text;
    if (!out) throw Error("write failed for '" + path + "'");
}

// ---------------------------------------------------------------------------

struct ChainFlags {
    std::string path;
    std::string tip;
    std::vector<std::string> masked;

    void add(CLI::App* cmd, bool positional) {
        if (positional) cmd->add_option("chain", path, "URDF-subset chain file")->required();
        else cmd->add_option("--chain", path, "URDF-subset chain file")->required();
        cmd->add_option("--tip", tip, "tip link (default: the unique leaf)");
        cmd->add_option("--mask", masked, "joint to exclude from IK (repeatable)");
    }
    KinematicChain load() const { return load_chain(path, ChainOptions{"", tip, masked}); }
};

int cmd_describe(const ChainFlags& chain, bool urdf) {
    const KinematicChain c = chain.load();
    std::cout << (urdf ? to_urdf(c) : describe(c));
    return kExitOk;
}

int cmd_gen_dataset(const ChainFlags& chain, long long n, std::uint64_t seed, const std::string& out) {
    if (n < 1) throw ValidationError("-n must be at least 1");
    const KinematicChain c = chain.load();
    const IkDataset ds = generate_dataset(c, static_cast<std::size_t>(n), seed);
    if (out == "-") write_dataset(std::cout, ds);
    else save_dataset(out, ds);
    return kExitOk;
}

struct TrainFlags {
    std::string dataset;
    std::string model_out;
    std::string report_out;
    TrainSettings settings;
    MdnConfig arch;
    std::uint64_t seed = 0;
    bool quiet = false;
};

void print_progress(const EpochRecord& r, void* user) {
    const int every = *static_cast<int*>(user);
    if (r.epoch % every == 0)
        std::cerr << "epoch " << r.epoch << " lr " << r.lr << " train_nll " << r.train_nll << " val_nll " << r.val_nll
                  << "\n";
}

int cmd_train(TrainFlags f) {
    const IkDataset ds = load_dataset(f.dataset);
    f.settings.seed = f.seed;
    f.arch.seed = f.seed;
    f.settings.validate(ds.samples.size());
    int every = 10;
    const TrainResult res = train(ds, f.settings, f.arch, f.quiet ? nullptr : print_progress, &every);
    const std::string report_path = f.report_out.empty() ? f.model_out + ".report.csv" : f.report_out;
    write_text_file(report_path, report_csv(res.report));
    if (res.report.diverged) {
        std::cerr << "training diverged: " << res.report.message << "\n";
        return kExitRuntime;
    }
    save_model(f.model_out, res.model);
    if (!f.quiet && !res.report.epochs.empty()) {
        const auto& last = res.report.epochs.back();
        std::cerr << "final train_nll " << last.train_nll << " val_nll " << last.val_nll << "\n";
    }
    return kExitOk;
}

// ---------------------------------------------------------------------------

struct EvalTarget {
    Eigen::Vector3d position;
    std::optional<JointConfig> known;
};

std::vector<EvalTarget> read_targets(const std::string& path, std::size_t dof) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open targets file '" + path + "'");
    std::vector<EvalTarget> out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        for (char& ch : line)
            if (ch == ',') ch = ' ';
        std::istringstream is(line);
        std::vector<double> vals;
        for (std::string tok; is >> tok;) {
            try {
                std::size_t used = 0;
                vals.push_back(std::stod(tok, &used));
                if (used != tok.size()) throw std::invalid_argument(tok);
            } catch (const std::exception&) {
                throw ParseError("targets: bad number '" + tok + "'", lineno);
            }
        }
        if (vals.empty()) continue;
        if (vals.size() != 3 && vals.size() != 3 + dof)
            throw ParseError("targets: expected x,y,z or x,y,z plus " + std::to_string(dof) + " joint values", lineno);
        EvalTarget t{Eigen::Vector3d(vals[0], vals[1], vals[2]), std::nullopt};
        if (vals.size() > 3) t.known = Eigen::Map<const Eigen::VectorXd>(vals.data() + 3, static_cast<Eigen::Index>(dof));
        out.push_back(std::move(t));
    }
    if (out.empty()) throw ValidationError("targets file has no targets");
    return out;
}

struct EvalFlags {
    std::string model;
    ChainFlags chain;
    std::string targets;
    long long random = 0;
    std::uint64_t seed = 0;
    std::string format = "text";
    bool no_timing = false;
};

int cmd_eval_ik(const EvalFlags& f) {
    const KinematicChain chain = f.chain.load();
    const MdnModel model = load_model(f.model, chain.dof());
    std::vector<EvalTarget> targets;
    if (!f.targets.empty() && f.random > 0) throw ValidationError("use either a targets file or --random, not both");
    if (!f.targets.empty()) {
        targets = read_targets(f.targets, chain.dof());
    } else if (f.random > 0) {
        Rng rng(f.seed);
        for (long long i = 0; i < f.random; ++i) {
            const JointConfig q = sample_config(chain, rng);
            targets.push_back({forward_kinematics(chain, q).translation, q});
        }
    } else {
        throw ValidationError("need a targets file or --random N");
    }

    const std::size_t dof = chain.dof();
    const bool csv = f.format == "csv";
    const bool timing = !f.no_timing;
    std::ostringstream os;
    if (csv) {
        os << "index,x,y,z,reachable,position_error_mm";
        for (std::size_t j = 0; j < dof; ++j) os << ",dq" << j << "_deg";
        os << ",dls_status";
        if (timing) os << ",infer_us";
        os << "\n";
    } else {
        os << "  #        x        y        z   err_mm";
        for (std::size_t j = 0; j < dof; ++j) os << "  dq" << j << "_deg";
        os << "  dls";
        if (timing) os << "  infer_us";
        os << "\n";
    }

    double sum_err = 0.0, max_err = 0.0, sum_us = 0.0;
    std::vector<double> sum_dq(dof, 0.0), max_dq(dof, 0.0);
    std::size_t reachable_count = 0, dq_count = 0;
    const Eigen::Vector3d center = chain.reach_center();
    for (std::size_t i = 0; i < targets.size(); ++i) {
        const Eigen::Vector3d& x = targets[i].position;
        const bool reachable = (x - center).norm() <= chain.reach();
        const auto t0 = std::chrono::steady_clock::now();
        const JointConfig q = predict_config(model, x);
        const double us = std::chrono::duration<double, std::micro>(std::chrono::steady_clock::now() - t0).count();
        const double err_mm = (forward_kinematics(chain, q).translation - x).norm() * 1000.0;
        const DlsResult dls = solve_dls(chain, x, chain.clamp(q));
        const bool converged = dls.status == DlsStatus::converged;
        Eigen::VectorXd dq = (q - dls.q).cwiseAbs() * kRadToDeg;

        if (csv) {
            os << i << "," << format_double(x.x()) << "," << format_double(x.y()) << "," << format_double(x.z()) << ","
               << (reachable ? 1 : 0) << "," << fixed(err_mm, 4);
            for (std::size_t j = 0; j < dof; ++j) os << "," << (converged ? fixed(dq[static_cast<Eigen::Index>(j)], 3) : "");
            os << "," << (converged ? "converged" : "not_converged");
            if (timing) os << "," << fixed(us, 1);
            os << "\n";
        } else {
            char head[96];
            std::snprintf(head, sizeof head, "%3zu %8.4f %8.4f %8.4f %8.3f", i, x.x(), x.y(), x.z(), err_mm);
            os << head;
            for (std::size_t j = 0; j < dof; ++j) {
                char cell[32];
                if (converged) std::snprintf(cell, sizeof cell, " %8.3f", dq[static_cast<Eigen::Index>(j)]);
                else std::snprintf(cell, sizeof cell, " %8s", "-");
                os << cell;
            }
            os << (converged ? "  ok " : "  nc ");
            if (timing) os << " " << fixed(us, 1);
            if (!reachable) os << "  unreachable (excluded)";
            os << "\n";
        }
        if (!reachable) continue;
        ++reachable_count;
        sum_err += err_mm;
        max_err = std::max(max_err, err_mm);
        sum_us += us;
        if (converged) {
            ++dq_count;
            for (std::size_t j = 0; j < dof; ++j) {
                sum_dq[j] += dq[static_cast<Eigen::Index>(j)];
                max_dq[j] = std::max(max_dq[j], dq[static_cast<Eigen::Index>(j)]);
            }
        }
    }
    const double n = reachable_count ? static_cast<double>(reachable_count) : 1.0;
    const double ndq = dq_count ? static_cast<double>(dq_count) : 1.0;
    if (csv) {
        os << "summary,,,," << reachable_count << "," << fixed(sum_err / n, 4);
        for (std::size_t j = 0; j < dof; ++j) os << "," << fixed(sum_dq[j] / ndq, 3);
        os << ",max_err_mm=" << fixed(max_err, 4);
        if (timing) os << "," << fixed(sum_us / n, 1);
        os << "\n";
    } else {
        os << "summary: targets=" << targets.size() << " reachable=" << reachable_count
           << " mean_err_mm=" << fixed(sum_err / n, 4) << " max_err_mm=" << fixed(max_err, 4) << " mean_dq_deg=";
        for (std::size_t j = 0; j < dof; ++j) os << (j ? "," : "") << fixed(sum_dq[j] / ndq, 3);
        os << " max_dq_deg=";
        for (std::size_t j = 0; j < dof; ++j) os << (j ? "," : "") << fixed(max_dq[j], 3);
        if (timing) os << " mean_infer_us=" << fixed(sum_us / n, 1);
        os << "\n";
    }
    std::cout << os.str();
    return kExitOk;
}

int cmd_metrics(const std::string& pred_path, const std::string& truth_path, const std::string& format) {
    const SegMask pred = mask_from_image(read_pnm(pred_path));
    const SegMask truth = mask_from_image(read_pnm(truth_path));
    const MetricReport r = metrics(pred, truth);
    if (format == "csv") std::cout << "iou,dice,acc\n" << fixed(r.iou, 6) << "," << fixed(r.dice, 6) << "," << fixed(r.pixel_accuracy, 6) << "\n";
    else std::cout << "iou=" << fixed(r.iou, 6) << " dice=" << fixed(r.dice, 6) << " acc=" << fixed(r.pixel_accuracy, 6) << "\n";
    return kExitOk;
}

int cmd_run(const std::string& config_path, const std::string& format) {
    RunConfig config;
    try {
        config = load_run_config(config_path);
    } catch (const ValidationError& e) {
        throw StageError("load-config", e.what(), true);
    }
    const LoadedRun inputs = load_run_inputs(config);

    std::unique_ptr<CommandSink> sink;
    std::ostringstream discard;
    if (config.commands_path == "-") sink = std::make_unique<StreamSink>(std::cout);
    else if (config.commands_path.empty()) sink = std::make_unique<StreamSink>(discard);
    else sink = std::make_unique<FileSink>(config.commands_path);

    const PipelineRunReport report = run_from_config(config, inputs, *sink);
    const std::size_t dof = inputs.chain.dof();
    const std::string text =
        format == "csv" ? report_csv_header(dof) + report_csv_row(report, dof) : render_report_text(report);
    if (config.report_path.empty()) std::cout << text;
    else write_text_file(config.report_path, text);
    if (!config.overlay_path.empty()) {
        std::vector<Blob> marked;
        if (report.chosen_blob) marked.push_back(*report.chosen_blob);
        write_pnm(config.overlay_path, overlay_centroids(inputs.image, marked));
    }
    for (const auto& st : report.stage_timings) std::cerr << "time_us." << st.stage << " " << fixed(st.micros, 1) << "\n";
    if (report.outcome == PipelineOutcome::no_colonies) std::cerr << "no colonies detected\n";
    return kExitOk;
}

int cmd_replay(const ChainFlags& chain_flags, const std::string& calibration, const std::string& script_path) {
    const KinematicChain chain = chain_flags.load();
    const CalibrationMap map = load_calibration(calibration);
    std::ifstream in(script_path, std::ios::binary);
    if (!in) throw ValidationError("cannot open serial script '" + script_path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    const auto trace = replay_serial(ss.str(), chain, map);
    std::cout << "line,x,y,z\n";
    for (const auto& p : trace)
        std::cout << p.line << "," << format_double(p.position.x()) << "," << format_double(p.position.y()) << ","
                  << format_double(p.position.z()) << "\n";
    return kExitOk;
}

int cmd_solve(const ChainFlags& chain_flags, const std::vector<double>& target, const std::vector<double>& q0_vals,
              const DlsSettings& settings) {
    const KinematicChain chain = chain_flags.load();
    JointConfig q0 = chain.mid_config();
    if (!q0_vals.empty()) {
        if (q0_vals.size() != chain.dof()) throw DimensionError("--q0 needs " + std::to_string(chain.dof()) + " values");
        q0 = Eigen::Map<const Eigen::VectorXd>(q0_vals.data(), static_cast<Eigen::Index>(q0_vals.size()));
    }
    const DlsResult r = solve_dls(chain, Eigen::Vector3d(target[0], target[1], target[2]), q0, settings);
    std::cout << "status: " << (r.status == DlsStatus::converged ? "converged" : "not_converged") << "\n";
    std::cout << "iterations: " << r.iterations << "\n";
    std::cout << "error_m: " << format_double(r.error) << "\n";
    std::cout << "q:";
    for (Eigen::Index i = 0; i < r.q.size(); ++i) std::cout << " " << format_double(r.q[i]);
    std::cout << "\n";
    return r.status == DlsStatus::converged ? kExitOk : kExitRuntime;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Learned inverse kinematics toolkit: chains, datasets, MDN training, evaluation and the colony pipeline"};
    app.require_subcommand(1);
    app.allow_extras(false);

    // describe
    ChainFlags describe_chain;
    bool describe_urdf = false;
    auto* describe = app.add_subcommand("describe", "Print a chain summary (exit 0 ok, 2 parse error)");
    describe_chain.add(describe, true);
    describe->add_flag("--urdf", describe_urdf, "print the normalized URDF instead of the summary");

    // gen-dataset
    ChainFlags gen_chain;
    long long gen_n = 0;
    std::uint64_t gen_seed = 0;
    std::string gen_out;
    auto* gen = app.add_subcommand("gen-dataset", "Sample joint configurations and write the FK dataset (exit 0/2)");
    gen_chain.add(gen, true);
    gen->add_option("-n,--count", gen_n, "number of samples")->required();
    gen->add_option("--seed", gen_seed, "random seed");
    gen->add_option("-o,--out", gen_out, "output CSV ('-' for stdout)")->required();

    // train
    TrainFlags tf;
    auto* trainc = app.add_subcommand("train", "Train an MDN on a dataset (exit 0 ok, 1 diverged, 2 invalid input)");
    trainc->add_option("dataset", tf.dataset, "dataset CSV")->required();
    trainc->add_option("-o,--out", tf.model_out, "output model JSON")->required();
    trainc->add_option("--report", tf.report_out, "training report CSV (default <out>.report.csv)");
    trainc->add_option("--epochs", tf.settings.epochs, "epochs")->capture_default_str();
    trainc->add_option("--batch-size", tf.settings.batch_size, "mini-batch size")->capture_default_str();
    trainc->add_option("--lr", tf.settings.initial_lr, "initial learning rate")->capture_default_str();
    trainc->add_option("--lr-decay", tf.settings.lr_decay, "learning rate factor per decay step")->capture_default_str();
    trainc->add_option("--decay-every", tf.settings.decay_every, "epochs per decay step")->capture_default_str();
    trainc->add_option("--split", tf.settings.split_fraction, "training fraction of the dataset")->capture_default_str();
    trainc->add_option("--components", tf.arch.components, "mixture components K")->capture_default_str();
    trainc->add_option("--hidden-layers", tf.arch.hidden_layers, "hidden layers")->capture_default_str();
    trainc->add_option("--hidden-width", tf.arch.hidden_width, "units per hidden layer")->capture_default_str();
    trainc->add_option("--seed", tf.seed, "seed for init, split and shuffling");
    trainc->add_flag("-q,--quiet", tf.quiet, "no progress output");

    // eval-ik
    EvalFlags ef;
    auto* eval = app.add_subcommand("eval-ik", "Per-target MDN accuracy against FK and the DLS solver (exit 0/2)");
    eval->add_option("--model", ef.model, "model JSON")->required();
    ef.chain.add(eval, false);
    eval->add_option("--targets", ef.targets, "targets file: x,y,z[,q...] per line");
    eval->add_option("--random", ef.random, "evaluate N random reachable targets instead");
    eval->add_option("--seed", ef.seed, "seed for --random");
    eval->add_option("--format", ef.format, "text or csv")->check(CLI::IsMember({"text", "csv"}));
    eval->add_flag("--no-timing", ef.no_timing, "omit inference timings (output becomes reproducible)");

    // metrics
    std::string pred_mask, truth_mask, metrics_format = "text";
    auto* metricsc = app.add_subcommand("metrics", "IoU / Dice / accuracy of two PGM masks (exit 0/2)");
    metricsc->add_option("pred", pred_mask, "predicted mask")->required();
    metricsc->add_option("truth", truth_mask, "ground-truth mask")->required();
    metricsc->add_option("--format", metrics_format, "text or csv")->check(CLI::IsMember({"text", "csv"}));

    // run
    std::string run_config, run_format = "text";
    auto* run = app.add_subcommand("run", "Run the image-to-command pipeline from a config file (exit 0/1/2)");
    run->add_option("config", run_config, "run configuration file")->required();
    run->add_option("--format", run_format, "text or csv")->check(CLI::IsMember({"text", "csv"}));

    // replay
    ChainFlags replay_chain;
    std::string replay_cal, replay_script;
    auto* replay = app.add_subcommand("replay", "Replay a serial command script through FK (exit 0/2)");
    replay_chain.add(replay, false);
    replay->add_option("--calibration", replay_cal, "calibration map file")->required();
    replay->add_option("script", replay_script, "serial command script")->required();

    // solve
    ChainFlags solve_chain;
    std::vector<double> solve_target, solve_q0;
    DlsSettings dls;
    auto* solve = app.add_subcommand("solve", "Damped least squares IK for one target (exit 0 ok, 1 not converged, 2 invalid)");
    solve_chain.add(solve, false);
    solve->add_option("--target", solve_target, "x y z in meters")->required()->expected(3);
    solve->add_option("--q0", solve_q0, "initial configuration (default: mid-range)");
    solve->add_option("--damping", dls.damping, "lambda")->capture_default_str();
    solve->add_option("--max-iters", dls.max_iters, "iteration cap")->capture_default_str();
    solve->add_option("--tol", dls.position_tol, "position tolerance in meters")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (*describe) return cmd_describe(describe_chain, describe_urdf);
        if (*gen) return cmd_gen_dataset(gen_chain, gen_n, gen_seed, gen_out);
        if (*trainc) return cmd_train(tf);
        if (*eval) return cmd_eval_ik(ef);
        if (*metricsc) return cmd_metrics(pred_mask, truth_mask, metrics_format);
        if (*run) return cmd_run(run_config, run_format);
        if (*replay) return cmd_replay(replay_chain, replay_cal, replay_script);
        if (*solve) return cmd_solve(solve_chain, solve_target, solve_q0, dls);
    } catch (const StageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return e.validation() ? kExitUsage : kExitRuntime;
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitUsage;
}
