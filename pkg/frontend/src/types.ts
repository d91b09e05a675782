/** Wire types shared with the gateway's event log and HTTP API. */

export interface EventRecord {
  seq: number;
  kind: string;
  body: any;
  at: number;
}

export type StepStatus = "pending" | "awaiting_approval" | "ok" | "error";

export interface TraceStep {
  step: number;
  thought: string;
  tool: string;
  actionText: string;
  status: StepStatus;
  resultSummary: string;
}

export interface TraceViewModel {
  steps: TraceStep[];
  outcome: "running" | "final" | "timeout";
  finalThought: string | null;
  finalText: string | null;
  finalArtifacts: string[];
  aborted: boolean;
}

export interface GalleryCandidate {
  index: number;
  editor: string;
  image: string; // bare artifact id
  cpg: number;
  flipped: boolean;
  ssim: number;
  sip: number;
  score: number;
  selected: boolean;
}

export interface GalleryViewModel {
  factual: string | null;
  candidates: GalleryCandidate[];
  differenceMap: string | null;
}

export interface ViewModels {
  trace: TraceViewModel;
  gallery: GalleryViewModel;
}
