#include "krff/trajectory_io.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>

namespace krff {

static_assert(std::endian::native == std::endian::little,
              "binary trajectory format assumes a little-endian host");

namespace {

constexpr std::array<char, 8> kMagic{'K', 'R', 'F', 'F', 'T', 'R', 'J', '\0'};

template <class T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T)))
    throw UsageError("trajectory binary: truncated input");
  return v;
}

}  // namespace

void write_ensemble_csv(std::ostream& os, const ParticleEnsemble& ens) {
  require(!ens.states.empty(), "write_ensemble_csv: empty ensemble");
  const Eigen::Index d = ens.states.front().cols();
  os << "t,particle_id";
  for (Eigen::Index k = 0; k < d; ++k) os << ",x" << k;
  os << "\n" << std::setprecision(17);
  for (std::size_t t = 0; t < ens.states.size(); ++t) {
    const Mat& s = ens.states[t];
    for (Eigen::Index p = 0; p < s.rows(); ++p) {
      os << ens.times[static_cast<Eigen::Index>(t)] << "," << p;
      for (Eigen::Index k = 0; k < d; ++k) os << "," << s(p, k);
      os << "\n";
    }
  }
}

ParticleEnsemble read_ensemble_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw UsageError("trajectory csv: empty input");
  std::vector<std::string> cols;
  {
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cols.push_back(c);
  }
  require(cols.size() >= 3 && cols[0] == "t" && cols[1] == "particle_id",
          "trajectory csv: header must start with t,particle_id");
  const auto d = static_cast<Eigen::Index>(cols.size() - 2);
  for (Eigen::Index k = 0; k < d; ++k)
    require(cols[static_cast<std::size_t>(k + 2)] == "x" + std::to_string(k),
            "trajectory csv: bad coordinate column name");

  std::vector<double> times;
  std::vector<std::vector<std::vector<double>>> rows;  // [time][particle][coord]
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string c;
    std::getline(ss, c, ',');
    const double t = std::stod(c);
    std::getline(ss, c, ',');
    const long pid = std::stol(c);
    std::vector<double> x;
    while (std::getline(ss, c, ',')) x.push_back(std::stod(c));
    require(static_cast<Eigen::Index>(x.size()) == d, "trajectory csv: ragged row");
    if (times.empty() || times.back() != t) {
      require(times.empty() || t > times.back(), "trajectory csv: times must increase");
      times.push_back(t);
      rows.emplace_back();
    }
    require(pid == static_cast<long>(rows.back().size()),
            "trajectory csv: particle ids must be 0..N-1 within each time");
    rows.back().push_back(std::move(x));
  }
  require(!times.empty(), "trajectory csv: no data rows");
  ParticleEnsemble ens;
  ens.times = Eigen::Map<const Vec>(times.data(), static_cast<Eigen::Index>(times.size()));
  const auto n = static_cast<Eigen::Index>(rows.front().size());
  for (const auto& snap : rows) {
    require(static_cast<Eigen::Index>(snap.size()) == n,
            "trajectory csv: particle count differs between times");
    Mat m(n, d);
    for (Eigen::Index p = 0; p < n; ++p)
      for (Eigen::Index k = 0; k < d; ++k)
        m(p, k) = snap[static_cast<std::size_t>(p)][static_cast<std::size_t>(k)];
    ens.states.push_back(std::move(m));
  }
  return ens;
}

void write_ensemble_binary(std::ostream& os, const ParticleEnsemble& ens) {
  require(!ens.states.empty(), "write_ensemble_binary: empty ensemble");
  const Eigen::Index n = ens.states.front().rows();
  const Eigen::Index d = ens.states.front().cols();
  os.write(kMagic.data(), kMagic.size());
  put<std::uint32_t>(os, kTrajectoryFormatVersion);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(d));
  put<std::uint64_t>(os, static_cast<std::uint64_t>(ens.states.size()));
  put<std::uint64_t>(os, static_cast<std::uint64_t>(n));
  os.write(reinterpret_cast<const char*>(ens.times.data()),
           static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(ens.times.size())));
  std::vector<double> buf(static_cast<std::size_t>(n * d));
  for (const Mat& s : ens.states) {
    for (Eigen::Index p = 0; p < n; ++p)
      for (Eigen::Index k = 0; k < d; ++k) buf[static_cast<std::size_t>(p * d + k)] = s(p, k);
    os.write(reinterpret_cast<const char*>(buf.data()),
             static_cast<std::streamsize>(sizeof(double) * buf.size()));
  }
}

ParticleEnsemble read_ensemble_binary(std::istream& is) {
  std::array<char, 8> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kMagic)
    throw UsageError("trajectory binary: bad magic");
  const auto version = get<std::uint32_t>(is);
  require(version == kTrajectoryFormatVersion,
          "trajectory binary: unsupported version " + std::to_string(version));
  const auto d = static_cast<Eigen::Index>(get<std::uint32_t>(is));
  const auto steps = static_cast<Eigen::Index>(get<std::uint64_t>(is));
  const auto n = static_cast<Eigen::Index>(get<std::uint64_t>(is));
  ParticleEnsemble ens;
  ens.times.resize(steps);
  if (!is.read(reinterpret_cast<char*>(ens.times.data()),
               static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(steps))))
    throw UsageError("trajectory binary: truncated input");
  std::vector<double> buf(static_cast<std::size_t>(n * d));
  for (Eigen::Index t = 0; t < steps; ++t) {
    if (!is.read(reinterpret_cast<char*>(buf.data()),
                 static_cast<std::streamsize>(sizeof(double) * buf.size())))
      throw UsageError("trajectory binary: truncated input");
    Mat m(n, d);
    for (Eigen::Index p = 0; p < n; ++p)
      for (Eigen::Index k = 0; k < d; ++k) m(p, k) = buf[static_cast<std::size_t>(p * d + k)];
    ens.states.push_back(std::move(m));
  }
  return ens;
}

void save_ensemble(const std::filesystem::path& path, const ParticleEnsemble& ens) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  if (path.extension() == ".csv")
    write_ensemble_csv(os, ens);
  else
    write_ensemble_binary(os, ens);
  if (!os) throw std::runtime_error("write failed for " + path.string());
}

ParticleEnsemble load_ensemble(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  return path.extension() == ".csv" ? read_ensemble_csv(is) : read_ensemble_binary(is);
}

}  // namespace krff
