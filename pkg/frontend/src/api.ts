/** Thin client over the gateway HTTP API; the console's only backend access. */

export interface SessionRequest {
  query: string;
  image?: string;
  scenario?: string;
  seed?: number;
  t_max?: number;
  approval_mode?: "auto" | "manual";
}

export class GatewayClient {
  constructor(readonly baseUrl: string) {}

  async createSession(request: SessionRequest): Promise<string> {
    const response = await fetch(`${this.baseUrl}/sessions`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(request),
    });
    if (response.status !== 201) {
      throw new Error(`create session failed: ${response.status} ${await response.text()}`);
    }
    const body = (await response.json()) as { id: string };
    return body.id;
  }

  async control(sessionId: string, command: "pause" | "resume" | "approve" | "abort"): Promise<void> {
    const response = await fetch(`${this.baseUrl}/sessions/${sessionId}/control`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ command }),
    });
    if (!response.ok) {
      throw new Error(`control ${command} failed: ${response.status}`);
    }
  }

  artifactUrl(id: string, colormap: "gray" | "heat" = "gray"): string {
    return `${this.baseUrl}/artifacts/${id}.png?map=${colormap}`;
  }

  async health(): Promise<any> {
    const response = await fetch(`${this.baseUrl}/healthz`);
    return response.json();
  }
}
