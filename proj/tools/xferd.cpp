// xferd: the transfer daemon.

#include <csignal>
#include <cstdio>
#include <iostream>

#include <CLI11.hpp>

#include "xdfs/server.hpp"

using namespace xdfs;

int main(int argc, char** argv) {
  CLI::App app{"xferd - parallel file transfer daemon"};
  app.require_subcommand(1);
  auto* serve = app.add_subcommand("serve", "accept transfers until interrupted");

  std::string bind = "0.0.0.0:4040";
  std::string root;
  std::string disk_mode = "sync";
  double fill_timeout = 30, idle_timeout = 60;
  std::size_t max_sessions = 64;
  std::string log_path;
  std::string log_level = "info";
  serve->add_option("--bind", bind, "HOST:PORT to listen on")->capture_default_str();
  serve->add_option("--root", root, "directory remote file names resolve under")->required();
  serve->add_option("--disk-mode", disk_mode, "sync or async")->check(CLI::IsMember({"sync", "async"}))
      ->capture_default_str();
  serve->add_option("--fill-timeout", fill_timeout, "seconds a session may wait for its channels")
      ->check(CLI::PositiveNumber)->capture_default_str();
  serve->add_option("--idle-timeout", idle_timeout, "seconds without progress before a session fails")
      ->check(CLI::PositiveNumber)->capture_default_str();
  serve->add_option("--max-sessions", max_sessions)->check(CLI::Range(std::size_t{1}, std::size_t{1} << 20))
      ->capture_default_str();
  serve->add_option("--log", log_path, "log file (default stderr)");
  serve->add_option("--log-level", log_level)->check(CLI::IsMember({"debug", "info", "warn", "error"}))
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  server::ServerConfig cfg;
  try {
    cfg.bind = transport::Endpoint::parse(bind);
    cfg.disk_mode = *storage::parse_disk_mode(disk_mode);
  } catch (const Error& e) {
    std::cerr << "xferd: " << e.what() << "\n";
    return 2;
  }
  cfg.root_dir = root;
  cfg.fill_timeout = std::chrono::milliseconds(static_cast<long long>(fill_timeout * 1000));
  cfg.idle_timeout = std::chrono::milliseconds(static_cast<long long>(idle_timeout * 1000));
  cfg.max_sessions = max_sessions;
  cfg.log_path = log_path;
  cfg.log_level = log_level;

  // Block the signals before any thread starts so only sigwait sees them.
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);
  std::signal(SIGPIPE, SIG_IGN);

  std::unique_ptr<server::Server> srv;
  try {
    srv = server::Server::serve(cfg);
  } catch (const Error& e) {
    std::cerr << "xferd: " << e.what() << "\n";
    return e.code() == Errc::BindFailure ? 1 : 2;
  }
  std::cout << "xferd listening on " << srv->endpoint().to_string() << std::endl;

  int sig = 0;
  sigwait(&set, &sig);
  auto m = srv->shutdown(std::chrono::seconds(10));
  std::cout << "xferd stopped: " << m.completed_sessions << " completed, " << m.failed_sessions << " failed"
            << std::endl;
  return 0;
}
