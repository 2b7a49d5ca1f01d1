#pragma once

// Everything except the HTTP segmenter client (amx/segmentation_remote.hpp),
// which pulls in cpp-httplib.

#include "amx/autodiff.hpp"
#include "amx/backend.hpp"
#include "amx/codec.hpp"
#include "amx/config.hpp"
#include "amx/csv.hpp"
#include "amx/discovery.hpp"
#include "amx/errors.hpp"
#include "amx/hard_prompt.hpp"
#include "amx/image.hpp"
#include "amx/log.hpp"
#include "amx/objective.hpp"
#include "amx/optimizer.hpp"
#include "amx/parallel.hpp"
#include "amx/pipeline.hpp"
#include "amx/prompt.hpp"
#include "amx/random.hpp"
#include "amx/report.hpp"
#include "amx/run_io.hpp"
#include "amx/sampler.hpp"
#include "amx/segmentation.hpp"
#include "amx/toy_world.hpp"
