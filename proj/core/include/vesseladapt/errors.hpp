#pragma once

#include <stdexcept>
#include <string>

namespace vesseladapt {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// I/O and indexing
struct MissingFile : Error { using Error::Error; };
struct CorruptHeader : Error { using Error::Error; };
struct ShapeMismatch : Error { using Error::Error; };
struct IllegalLabel : Error { using Error::Error; };
struct OverlappingSplits : Error { using Error::Error; };
struct MissingAnnotation : Error { using Error::Error; };

// preprocessing
struct EmptyDataset : Error { using Error::Error; };
struct DegenerateOutput : Error { using Error::Error; };
struct ConstantVolume : Error { using Error::Error; };
struct ChannelCountTooLarge : Error { using Error::Error; };

// synthetic data
struct SpecInfeasible : Error { using Error::Error; };

// networks and losses
struct ResolutionMismatch : Error { using Error::Error; };
struct NonFiniteGradient : Error { using Error::Error; };

// training
struct DivergenceDetected : Error { using Error::Error; };
struct EmptyStratum : Error { using Error::Error; };
struct NoValidRecords : Error { using Error::Error; };
struct CorruptCheckpoint : Error { using Error::Error; };

// evaluation
struct GridMismatch : Error { using Error::Error; };
struct EmptyMask : Error { using Error::Error; };

}  // namespace vesseladapt
