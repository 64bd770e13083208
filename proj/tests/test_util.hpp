#pragma once

// Shared helpers for the unit tests.

#include <filesystem>
#include <string>
#include <system_error>
#include <vector>

#include <unistd.h>

#include "cgrasp/hand_model.hpp"
#include "cgrasp/random.hpp"

namespace testing_util {

/// Joint angles uniform within limits, palm within 10 cm of the origin.
inline cgrasp::GraspPose random_pose(const cgrasp::HandModel& hand, cgrasp::Rng& rng) {
  cgrasp::GraspPose p = hand.zero_pose();
  for (int i = 0; i < 3; ++i) p.translation[i] = cgrasp::uniform(rng, -0.1, 0.1);
  p.rotation = cgrasp::Vec3(cgrasp::uniform(rng, -3.0, 3.0), cgrasp::uniform(rng, -1.4, 1.4),
                            cgrasp::uniform(rng, -3.0, 3.0));
  for (std::size_t j = 0; j < hand.dof(); ++j)
    p.joint_angles[j] = cgrasp::uniform(rng, hand.joints()[j].lo, hand.joints()[j].hi);
  return p;
}

/// Fresh scratch directory under the system temp dir, private to this
/// process (ctest may run test processes in parallel) and removed at exit.
inline std::filesystem::path scratch_dir(const std::string& name) {
  struct Registry {
    std::vector<std::filesystem::path> dirs;
    ~Registry() {
      std::error_code ec;
      for (const auto& d : dirs) std::filesystem::remove_all(d, ec);
    }
  };
  static Registry registry;
  const auto dir = std::filesystem::temp_directory_path() /
                   ("cgrasp_test_" + std::to_string(::getpid()) + "_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  registry.dirs.push_back(dir);
  return dir;
}

}  // namespace testing_util
