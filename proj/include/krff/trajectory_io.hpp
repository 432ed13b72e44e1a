#pragma once

// Persistence for particle ensembles.
//
// CSV: header `t,particle_id,x0,...,x{d-1}`, one row per (time, particle),
// time-major. Binary: 16-byte header (8-byte magic "KRFFTRJ\0", uint32
// format version, uint32 state dimension), then uint64 time count,
// uint64 particle count, the time vector and the states time-major, all
// little-endian IEEE doubles.

#include <filesystem>
#include <iosfwd>

#include "krff/dynamics.hpp"

namespace krff {

inline constexpr std::uint32_t kTrajectoryFormatVersion = 1;

void write_ensemble_csv(std::ostream& os, const ParticleEnsemble& ens);
ParticleEnsemble read_ensemble_csv(std::istream& is);

void write_ensemble_binary(std::ostream& os, const ParticleEnsemble& ens);
ParticleEnsemble read_ensemble_binary(std::istream& is);

void save_ensemble(const std::filesystem::path& path, const ParticleEnsemble& ens);
ParticleEnsemble load_ensemble(const std::filesystem::path& path);

}  // namespace krff
