#include <cstdlib>
#include <exception>
#include <iostream>
#include <string>

#include "CLI11.hpp"

#include "aubry/cli.hpp"

int main(int argc, char** argv) {
    using namespace aubry::cli;
    CLI::App app{"Aubry-Mather sets, Peierls barriers and their phase-space counterparts"};
    std::string config_path, out_dir, command = "all";
    int threads = 0;
    bool verbose = false;
    app.add_option("--config", config_path, "sectioned key = value configuration file")->required();
    app.add_option("--out", out_dir, "output directory (overrides [output] dir)");
    app.add_option("--command", command, "alpha, barrier, aubry, mane, mather, phase-barrier, phase-sets, invariance, all")
        ->check(CLI::IsMember(commands()));
    app.add_option("--threads", threads, "worker threads (overrides [run] threads)")->check(CLI::Range(1, 256));
    app.add_flag("--verbose", verbose, "progress messages on stderr");
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? Exit::ok : Exit::usage;
    }

    RunState st;
    try {
        st.cfg = load_config(config_path);
        apply_env_overrides(st.cfg);
        if (threads > 0) st.cfg.threads = threads;
        if (!out_dir.empty()) st.cfg.out_dir = out_dir;
        validate(st.cfg, config_path);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return Exit::config_error;
    }
    st.command = command;
    st.out = st.cfg.out_dir;
    st.verbose = verbose;
    try {
        int status = run(st);
        for (auto& k : st.checks)
            if (!k.pass)
                std::cerr << "check failed: " << k.name << " = " << aubry::fmt_real(k.value) << " (tolerance "
                          << aubry::fmt_real(k.tolerance) << ")" << (k.note.empty() ? "" : " " + k.note) << "\n";
        for (auto& d : st.diagnostics) std::cerr << "diagnostic: " << d << "\n";
        std::cout << st.results.dump(2) << "\n";
        return status;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return Exit::config_error;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return Exit::violation;
    }
}
