#pragma once

#include "ngm/encoding.hpp"
#include "ngm/evalmetrics.hpp"
#include "ngm/field.hpp"
#include "ngm/geometry.hpp"
#include "ngm/image_io.hpp"
#include "ngm/mesh.hpp"
#include "ngm/parallel.hpp"
#include "ngm/pipeline.hpp"
#include "ngm/pose_graph.hpp"
#include "ngm/query.hpp"
#include "ngm/rng.hpp"
#include "ngm/sampler.hpp"
#include "ngm/scene.hpp"
#include "ngm/synth.hpp"
#include "ngm/trainer.hpp"
