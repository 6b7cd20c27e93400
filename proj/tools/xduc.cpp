// xduc: url-copy client and benchmark driver.

#include <csignal>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "xdfs/client.hpp"

using namespace xdfs;

namespace {

std::string human_bps(double bps) {
  char buf[64];
  if (bps >= 1e9) std::snprintf(buf, sizeof buf, "%.2f Gb/s", bps / 1e9);
  else if (bps >= 1e6) std::snprintf(buf, sizeof buf, "%.2f Mb/s", bps / 1e6);
  else std::snprintf(buf, sizeof buf, "%.0f b/s", bps);
  return buf;
}

bool ends_with(const std::string& s, const std::string& suf) {
  return s.size() >= suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"xduc - copy files to and from an xferd server"};
  client::TransferSpec spec;
  std::string disk_mode = "sync";
  bool bench = false, raw_baseline = false;
  std::size_t repeats = 1;
  std::string sweep, out;
  double idle_timeout = 60;

  app.add_option("SRC", spec.source_url, "source URL")->required();
  app.add_option("DST", spec.dest_url, "destination URL")->required();
  app.add_option("-p,--parallel", spec.parallel, "parallel channels")->capture_default_str();
  app.add_option("--bs", spec.block_size, "block size in bytes")->capture_default_str();
  app.add_option("--tcp-bs", spec.tcp_window, "TCP buffer size in bytes")->capture_default_str();
  app.add_option("--disk-mode", disk_mode, "sync or async")->check(CLI::IsMember({"sync", "async"}))
      ->capture_default_str();
  app.add_flag("--force", spec.force, "overwrite an existing local destination");
  app.add_option("--idle-timeout", idle_timeout, "seconds")->check(CLI::PositiveNumber)->capture_default_str();
  app.add_flag("--bench", bench, "repeat the transfer and emit aggregate rows");
  app.add_option("--repeats", repeats, "runs per row")->check(CLI::PositiveNumber)->capture_default_str();
  app.add_option("--sweep", sweep, "comma separated parallelism values, e.g. 1,2,4,8");
  app.add_option("--out", out, "bench output file; .csv selects CSV, anything else JSON lines");
  app.add_flag("--raw-baseline", raw_baseline, "also measure a single loopback socket copy of the same size");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }
  std::signal(SIGPIPE, SIG_IGN);

  try {
    spec.disk_mode = *storage::parse_disk_mode(disk_mode);
    spec.idle_timeout = std::chrono::milliseconds(static_cast<long long>(idle_timeout * 1000));
    client::resolve(spec);

    if (!bench) {
      auto rep = client::transfer(spec);
      if (!rep.success) {
        std::cerr << "xduc: transfer failed: " << rep.error << "\n";
        return 3;
      }
      std::cout << rep.bytes_transferred << " bytes in " << rep.wall_time << " s (" << human_bps(rep.throughput)
                << ", " << rep.parallel << " channel" << (rep.parallel == 1 ? "" : "s") << ")\n";
      return 0;
    }

    std::vector<std::uint32_t> ns = sweep.empty() ? std::vector<std::uint32_t>{} : client::parse_sweep(sweep);
    std::ofstream file;
    bool csv = ends_with(out, ".csv");
    if (!out.empty()) {
      file.open(out, std::ios::trunc);
      if (!file) {
        std::cerr << "xduc: cannot open " << out << "\n";
        return 2;
      }
      if (csv) file << client::csv_header() << "\n";
    }
    std::ostream& os = out.empty() ? std::cout : file;
    auto res = client::bench(spec, repeats, ns, [&](const client::BenchRow& row) {
      os << (csv ? client::to_csv(row) : client::to_json(row)) << "\n";
      os.flush();
    });
    if (!res.success) {
      std::cerr << "xduc: bench aborted after " << res.rows.size() << " row(s): " << res.error << "\n";
      return 3;
    }
    if (raw_baseline && !res.rows.empty()) {
      double bps = client::raw_socket_baseline(res.rows.front().bytes, 1 << 20, spec.tcp_window);
      std::cerr << "raw loopback socket: " << human_bps(bps) << "\n";
    }
    return 0;
  } catch (const Error& e) {
    std::cerr << "xduc: " << e.what() << "\n";
    return e.code() == Errc::Usage ? 2 : 3;
  }
}
